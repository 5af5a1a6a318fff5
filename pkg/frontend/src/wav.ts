// Minimal RIFF/PCM16 mono writer for handing waveforms to the toolkit.

export function encodeWavPcm16(
  wave: Float32Array | Float64Array | number[],
  sampleRate: number,
): Buffer {
  const n = wave.length;
  const buf = Buffer.alloc(44 + 2 * n);
  buf.write("RIFF", 0, "ascii");
  buf.writeUInt32LE(36 + 2 * n, 4);
  buf.write("WAVE", 8, "ascii");
  buf.write("fmt ", 12, "ascii");
  buf.writeUInt32LE(16, 16); // fmt chunk size
  buf.writeUInt16LE(1, 20); // linear PCM
  buf.writeUInt16LE(1, 22); // mono
  buf.writeUInt32LE(sampleRate, 24);
  buf.writeUInt32LE(sampleRate * 2, 28); // byte rate
  buf.writeUInt16LE(2, 32); // block align
  buf.writeUInt16LE(16, 34); // bits per sample
  buf.write("data", 36, "ascii");
  buf.writeUInt32LE(2 * n, 40);
  for (let i = 0; i < n; i++) {
    const q = Math.round((wave[i] as number) * 32768);
    buf.writeInt16LE(Math.max(-32768, Math.min(32767, q)), 44 + 2 * i);
  }
  return buf;
}
