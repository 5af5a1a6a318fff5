"""Shard-based utterance IO.

Many small wav files are packed into big tar archives ("shards") that can
be streamed back sequentially with bounded memory. Small datasets can skip
the packing step and be read straight from disk via a JSON-lines data
list.

Shard layout: each utterance contributes two consecutive tar entries,
``<key>.spk`` holding the raw UTF-8 speaker label (no trailing newline)
followed by ``<key>.wav`` holding a RIFF/PCM16 mono wav.
"""

import io
import json
import os
import tarfile
import warnings
import wave as wavlib
from dataclasses import dataclass

import numpy as np


class UioError(Exception):
    """Base class for data loading errors."""


class ShardFormatError(UioError):
    """A shard archive violates the .spk/.wav pairing layout."""


class DuplicateKeyError(UioError):
    """Two records with the same key were packed into one shard set."""


@dataclass(frozen=True)
class UtteranceRecord:
    key: str
    speaker: str
    pcm: np.ndarray  # int16 mono samples
    sample_rate: int


@dataclass
class ShardManifest:
    shard_paths: list
    total_utterances: list | None = None  # per shard; None if unknown


@dataclass(frozen=True)
class DataListEntry:
    key: str
    wav_path: str
    speaker: str


def encode_wav(pcm, sample_rate: int) -> bytes:
    """Serialize int16 mono samples as a RIFF/PCM16 wav blob."""
    pcm = np.asarray(pcm)
    buf = io.BytesIO()
    with wavlib.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.astype("<i2").tobytes())
    return buf.getvalue()


def decode_wav(data: bytes, where: str = "<memory>"):
    """Decode a PCM16 wav blob to (int16 samples, rate).

    Multi-channel input keeps the first channel and emits a warning; any
    encoding other than 16-bit linear PCM is rejected.
    """
    try:
        with wavlib.open(io.BytesIO(data), "rb") as w:
            if w.getsampwidth() != 2:
                raise ShardFormatError(
                    f"{where}: only 16-bit PCM wav is supported "
                    f"(got sample width {w.getsampwidth()})"
                )
            if w.getcomptype() != "NONE":
                raise ShardFormatError(f"{where}: compressed wav not supported")
            channels = w.getnchannels()
            rate = w.getframerate()
            frames = w.readframes(w.getnframes())
    except wavlib.Error as e:
        raise ShardFormatError(f"{where}: malformed wav ({e})") from e
    pcm = np.frombuffer(frames, dtype="<i2")
    if channels > 1:
        warnings.warn(f"{where}: {channels} channels, keeping the first")
        pcm = pcm.reshape(-1, channels)[:, 0]
    return pcm.copy(), rate


def _validate_record(rec: UtteranceRecord):
    if not rec.key or any(c.isspace() for c in rec.key):
        raise UioError(f"invalid key {rec.key!r}: must be non-empty, no whitespace")
    if rec.sample_rate <= 0:
        raise UioError(f"{rec.key}: sample_rate must be positive")
    if len(rec.pcm) == 0:
        raise UioError(f"{rec.key}: empty pcm")


def pack_shards(records, shard_size: int, out_dir, gzip: bool = False,
                prefix: str = "shard") -> ShardManifest:
    """Pack a record stream into tar shards of ``shard_size`` utterances.

    The final shard may be short. Duplicate keys are a hard error: a
    silent overwrite would corrupt trial bookkeeping downstream.
    """
    if shard_size < 1:
        raise ValueError("shard_size must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    ext = ".tar.gz" if gzip else ".tar"
    mode = "w:gz" if gzip else "w"

    seen = set()
    paths, counts = [], []
    tar = None
    in_shard = 0
    try:
        for rec in records:
            _validate_record(rec)
            if rec.key in seen:
                raise DuplicateKeyError(f"duplicate key {rec.key!r}")
            seen.add(rec.key)
            if tar is None:
                path = os.path.join(out_dir, f"{prefix}_{len(paths):06d}{ext}")
                tar = tarfile.open(path, mode)
                paths.append(path)
                counts.append(0)
                in_shard = 0
            spk_bytes = rec.speaker.encode("utf-8")
            info = tarfile.TarInfo(name=f"{rec.key}.spk")
            info.size = len(spk_bytes)
            tar.addfile(info, io.BytesIO(spk_bytes))
            wav_bytes = encode_wav(rec.pcm, rec.sample_rate)
            info = tarfile.TarInfo(name=f"{rec.key}.wav")
            info.size = len(wav_bytes)
            tar.addfile(info, io.BytesIO(wav_bytes))
            in_shard += 1
            counts[-1] = in_shard
            if in_shard == shard_size:
                tar.close()
                tar = None
    finally:
        if tar is not None:
            tar.close()
    return ShardManifest(shard_paths=paths, total_utterances=counts)


def read_shards(manifest: ShardManifest):
    """Stream records back from a shard set.

    Shards are consumed strictly in order, one entry at a time; a whole
    shard is never materialized in memory.
    """
    for path in manifest.shard_paths:
        try:
            # "r|*" is the streaming mode: sequential reads, gzip handled.
            with tarfile.open(path, "r|*") as tar:
                pending = None  # (key, speaker) waiting for its .wav
                for member in tar:
                    # tarfile otherwise remembers every TarInfo it served,
                    # which would break the constant-memory guarantee
                    tar.members.clear()
                    if not member.isfile():
                        continue
                    name = member.name
                    payload = tar.extractfile(member).read()
                    if name.endswith(".spk"):
                        if pending is not None:
                            raise ShardFormatError(
                                f"{path}: entry {name}: expected "
                                f"{pending[0]}.wav before another .spk"
                            )
                        pending = (name[:-4], payload.decode("utf-8"))
                    elif name.endswith(".wav"):
                        if pending is None or pending[0] != name[:-4]:
                            raise ShardFormatError(
                                f"{path}: entry {name}: .wav without a "
                                f"preceding matching .spk"
                            )
                        key, speaker = pending
                        pending = None
                        pcm, rate = decode_wav(payload, where=f"{path}:{name}")
                        yield UtteranceRecord(key=key, speaker=speaker,
                                              pcm=pcm, sample_rate=rate)
                    else:
                        raise ShardFormatError(
                            f"{path}: unexpected entry {name!r}"
                        )
                if pending is not None:
                    raise ShardFormatError(
                        f"{path}: dangling {pending[0]}.spk at end of shard"
                    )
        except tarfile.TarError as e:
            raise ShardFormatError(f"{path}: corrupt tar ({e})") from e


def read_raw(entries):
    """Stream records straight from wav files listed in data-list entries."""
    for entry in entries:
        try:
            with open(entry.wav_path, "rb") as f:
                data = f.read()
        except OSError as e:
            raise UioError(f"{entry.key}: cannot read {entry.wav_path} ({e})") from e
        pcm, rate = decode_wav(data, where=f"{entry.key} ({entry.wav_path})")
        yield UtteranceRecord(key=entry.key, speaker=entry.speaker,
                              pcm=pcm, sample_rate=rate)


def partition(manifest: ShardManifest, worker: int, num_workers: int) -> ShardManifest:
    """Round-robin shard assignment; partitions are disjoint and cover all."""
    if not 0 <= worker < num_workers:
        raise ValueError(f"worker {worker} out of range for {num_workers} workers")
    counts = manifest.total_utterances
    return ShardManifest(
        shard_paths=manifest.shard_paths[worker::num_workers],
        total_utterances=None if counts is None else counts[worker::num_workers],
    )


def read_data_list(path):
    """Yield DataListEntry items from a JSON-lines data list."""
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                yield DataListEntry(key=obj["key"], wav_path=obj["wav"],
                                    speaker=obj["speaker"])
            except (json.JSONDecodeError, KeyError) as e:
                raise UioError(f"{path}:{lineno}: bad data list line ({e})") from e


def write_data_list(entries, path):
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps({"key": e.key, "wav": e.wav_path,
                                "speaker": e.speaker}) + "\n")


def read_shards_list(path) -> ShardManifest:
    """Load a manifest from a one-path-per-line shards list."""
    with open(path, encoding="utf-8") as f:
        paths = [line.strip() for line in f if line.strip()]
    return ShardManifest(shard_paths=paths)


def write_shards_list(manifest: ShardManifest, path):
    with open(path, "w", encoding="utf-8") as f:
        for p in manifest.shard_paths:
            f.write(p + "\n")
