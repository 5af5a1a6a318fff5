import numpy as np
import pytest

from spkr import uio


def make_records(n, rng, min_len=300, max_len=900, rate=16000, n_speakers=10,
                 prefix="utt"):
    """Synthetic int16 utterances with round-robin speaker labels."""
    records = []
    for i in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        pcm = rng.integers(-20000, 20000, size=length).astype(np.int16)
        records.append(uio.UtteranceRecord(
            key=f"{prefix}{i:05d}",
            speaker=f"spk{i % n_speakers:03d}",
            pcm=pcm,
            sample_rate=rate,
        ))
    return records


def write_wav(path, pcm, rate=16000):
    with open(path, "wb") as f:
        f.write(uio.encode_wav(np.asarray(pcm, dtype=np.int16), rate))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
