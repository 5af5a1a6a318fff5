// Scripting client for the speaker toolkit. A session owns validated
// model paths plus a scratch directory; embed and score delegate to the
// `spkr` CLI, exchanging data through its documented file formats (wav,
// WSTN tensor container, embedding text, trials/scores lines), so the
// results are identical to driving the CLI by hand.

import { spawnSync } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { readTensors } from "./wstn.js";
import { encodeWavPcm16 } from "./wav.js";

export { readTensors, writeTensors, Tensor, TensorFormatError } from "./wstn.js";
export { encodeWavPcm16 } from "./wav.js";

const CLI = process.env.SPKR_BIN ?? "spkr";

export class SessionError extends Error {}

export type ScoreMethod = "cosine" | "plda";

export interface SessionHandle {
  readonly weightsPath: string;
  readonly configPath: string;
  readonly pldaPath?: string;
  /** scratch directory for per-call files; removed on close */
  readonly workDir: string;
  closed: boolean;
  calls: number;
}

function checkContainer(p: string): void {
  let fd: number;
  try {
    fd = fs.openSync(p, "r");
  } catch (e) {
    throw new SessionError(`cannot open ${p}: ${(e as Error).message}`);
  }
  try {
    const magic = Buffer.alloc(4);
    const got = fs.readSync(fd, magic, 0, 4, 0);
    if (got !== 4 || magic.toString("ascii") !== "WSTN") {
      throw new SessionError(`${p}: not a WSTN tensor container`);
    }
  } finally {
    fs.closeSync(fd);
  }
}

/** Validate the model files and open a scratch session. */
export function load(
  weightsPath: string,
  configPath: string,
  pldaPath?: string,
): SessionHandle {
  checkContainer(weightsPath);
  try {
    fs.accessSync(configPath, fs.constants.R_OK);
  } catch {
    throw new SessionError(`cannot read config ${configPath}`);
  }
  if (pldaPath !== undefined) {
    checkContainer(pldaPath);
  }
  const workDir = fs.mkdtempSync(path.join(os.tmpdir(), "spkr-session-"));
  return { weightsPath, configPath, pldaPath, workDir, closed: false, calls: 0 };
}

export function close(handle: SessionHandle): void {
  if (!handle.closed) {
    fs.rmSync(handle.workDir, { recursive: true, force: true });
    handle.closed = true;
  }
}

function ensureOpen(handle: SessionHandle): void {
  if (handle.closed) {
    throw new SessionError("session is closed");
  }
}

function runCli(args: string[]): string {
  const proc = spawnSync(CLI, args, { encoding: "utf8" });
  if (proc.error) {
    throw new SessionError(`cannot run ${CLI}: ${proc.error.message}`);
  }
  if (proc.status !== 0) {
    throw new SessionError(
      `${CLI} ${args[0]} exited ${proc.status}: ${proc.stderr.trim()}`,
    );
  }
  return proc.stdout;
}

/** One `key v1 v2 ... vD` embedding-text line (full double precision). */
export function embeddingLine(
  key: string,
  vector: ArrayLike<number>,
): string {
  const parts = [key];
  for (let i = 0; i < vector.length; i++) {
    parts.push(Number(vector[i]).toExponential());
  }
  return parts.join(" ") + "\n";
}

/**
 * Embed one waveform (mono floats in [-1, 1]). The wave is written as a
 * PCM16 wav and run through `spkr extract`; the float32 embedding comes
 * back through the tensor container, bit-identical to a manual CLI run
 * on the same file.
 */
export function embed(
  handle: SessionHandle,
  wave: Float32Array | Float64Array,
  sampleRate: number,
): Float32Array {
  ensureOpen(handle);
  if (wave.length === 0) {
    throw new SessionError("empty waveform");
  }
  if (!Number.isInteger(sampleRate) || sampleRate <= 0) {
    throw new SessionError(`bad sample rate ${sampleRate}`);
  }
  const tag = `${process.pid}_${handle.calls++}`;
  const wavPath = path.join(handle.workDir, `utt_${tag}.wav`);
  const listPath = path.join(handle.workDir, `utt_${tag}.list`);
  const outPath = path.join(handle.workDir, `emb_${tag}.wstn`);
  try {
    fs.writeFileSync(wavPath, encodeWavPcm16(wave, sampleRate));
    fs.writeFileSync(
      listPath,
      JSON.stringify({ key: "utt", wav: wavPath, speaker: "unknown" }) + "\n",
    );
    runCli([
      "extract",
      "--weights", handle.weightsPath,
      "--config", handle.configPath,
      "--data-list", listPath,
      "--format", "wstn",
      "--out", outPath,
    ]);
    const tensor = readTensors(outPath).get("utt");
    if (!tensor) {
      throw new SessionError("extract output is missing the embedding");
    }
    return tensor.data;
  } finally {
    for (const p of [wavPath, listPath, outPath]) {
      fs.rmSync(p, { force: true });
    }
  }
}

/** Score an embedding pair; identical to the CLI's printed score. */
export function score(
  handle: SessionHandle,
  e1: ArrayLike<number>,
  e2: ArrayLike<number>,
  method: ScoreMethod = "cosine",
): number {
  ensureOpen(handle);
  if (e1.length === 0 || e2.length === 0 || e1.length !== e2.length) {
    throw new SessionError(
      `embedding lengths ${e1.length} and ${e2.length} do not match`,
    );
  }
  if (method === "plda" && handle.pldaPath === undefined) {
    throw new SessionError("session was loaded without a PLDA model");
  }
  const tag = `${process.pid}_${handle.calls++}`;
  const enrollPath = path.join(handle.workDir, `enroll_${tag}.txt`);
  const testPath = path.join(handle.workDir, `test_${tag}.txt`);
  const trialsPath = path.join(handle.workDir, `trials_${tag}.txt`);
  try {
    fs.writeFileSync(enrollPath, embeddingLine("a", e1));
    fs.writeFileSync(testPath, embeddingLine("b", e2));
    fs.writeFileSync(trialsPath, "a b unknown\n");
    const args =
      method === "plda"
        ? ["score-plda", "--plda", handle.pldaPath as string]
        : ["score-cosine"];
    const stdout = runCli([
      ...args,
      "--enroll", enrollPath,
      "--test", testPath,
      "--trials", trialsPath,
    ]);
    const fields = stdout.trim().split(/\s+/);
    if (fields.length !== 3) {
      throw new SessionError(`unexpected scorer output: ${stdout.trim()}`);
    }
    return Number(fields[2]);
  } finally {
    for (const p of [enrollPath, testPath, trialsPath]) {
      fs.rmSync(p, { force: true });
    }
  }
}
