import io
import itertools
import tarfile
import tracemalloc

import numpy as np
import pytest

from spkr import uio
from conftest import make_records


def test_shard_count_arithmetic(tmp_path, rng):
    records = make_records(1000, rng, min_len=50, max_len=60)
    manifest = uio.pack_shards(records, 400, tmp_path)
    assert len(manifest.shard_paths) == 3
    assert manifest.total_utterances == [400, 400, 200]


def test_single_record_shard_layout(tmp_path, rng):
    records = make_records(1, rng)
    manifest = uio.pack_shards(records, 1000, tmp_path)
    assert len(manifest.shard_paths) == 1
    with tarfile.open(manifest.shard_paths[0]) as tar:
        names = tar.getnames()
    assert names == ["utt00000.spk", "utt00000.wav"]


def test_roundtrip_byte_identical(tmp_path, rng):
    records = make_records(200, rng)
    manifest = uio.pack_shards(records, 64, tmp_path)
    back = list(uio.read_shards(manifest))
    assert len(back) == len(records)
    for orig, got in zip(records, back):
        assert got.key == orig.key
        assert got.speaker == orig.speaker
        assert got.sample_rate == orig.sample_rate
        assert got.pcm.tobytes() == orig.pcm.tobytes()


def test_gzip_roundtrip(tmp_path, rng):
    records = make_records(10, rng)
    manifest = uio.pack_shards(records, 4, tmp_path, gzip=True)
    assert all(p.endswith(".tar.gz") for p in manifest.shard_paths)
    back = list(uio.read_shards(manifest))
    assert [r.key for r in back] == [r.key for r in records]
    assert all(np.array_equal(a.pcm, b.pcm) for a, b in zip(records, back))


def test_duplicate_key_rejected(tmp_path, rng):
    records = make_records(3, rng)
    records.append(records[0])
    with pytest.raises(uio.DuplicateKeyError, match="utt00000"):
        list(uio.read_shards(uio.pack_shards(records, 10, tmp_path)))


def test_invalid_records_rejected(tmp_path):
    bad_key = uio.UtteranceRecord("a b", "s", np.ones(4, np.int16), 16000)
    with pytest.raises(uio.UioError, match="key"):
        uio.pack_shards([bad_key], 1, tmp_path)
    empty = uio.UtteranceRecord("k", "s", np.zeros(0, np.int16), 16000)
    with pytest.raises(uio.UioError, match="empty"):
        uio.pack_shards([empty], 1, tmp_path)
    bad_rate = uio.UtteranceRecord("k", "s", np.ones(4, np.int16), 0)
    with pytest.raises(uio.UioError, match="sample_rate"):
        uio.pack_shards([bad_rate], 1, tmp_path)


def _raw_tar(tmp_path, entries):
    path = str(tmp_path / "bad.tar")
    with tarfile.open(path, "w") as tar:
        for name, payload in entries:
            info = tarfile.TarInfo(name=name)
            info.size = len(payload)
            tar.addfile(info, io.BytesIO(payload))
    return uio.ShardManifest(shard_paths=[path])


def test_pairing_violations(tmp_path):
    wav = uio.encode_wav(np.ones(8, np.int16), 16000)
    # .wav with no preceding .spk
    manifest = _raw_tar(tmp_path, [("a.wav", wav)])
    with pytest.raises(uio.ShardFormatError, match="a.wav"):
        list(uio.read_shards(manifest))
    # two .spk in a row
    manifest = _raw_tar(tmp_path, [("a.spk", b"s"), ("b.spk", b"s")])
    with pytest.raises(uio.ShardFormatError, match="b.spk"):
        list(uio.read_shards(manifest))
    # dangling .spk at end
    manifest = _raw_tar(tmp_path, [("a.spk", b"s")])
    with pytest.raises(uio.ShardFormatError, match="dangling"):
        list(uio.read_shards(manifest))
    # mismatched stem
    manifest = _raw_tar(tmp_path, [("a.spk", b"s"), ("b.wav", wav)])
    with pytest.raises(uio.ShardFormatError):
        list(uio.read_shards(manifest))


def test_corrupt_tar_names_shard(tmp_path):
    path = tmp_path / "corrupt.tar"
    path.write_bytes(b"this is not a tar archive, not even close" * 20)
    manifest = uio.ShardManifest(shard_paths=[str(path)])
    with pytest.raises(uio.ShardFormatError, match="corrupt.tar"):
        list(uio.read_shards(manifest))


def test_wav_multichannel_warns_first_channel():
    # hand-build a stereo wav: interleave two distinct channels
    left = np.arange(10, dtype=np.int16)
    right = -np.arange(10, dtype=np.int16)
    inter = np.empty(20, np.int16)
    inter[0::2] = left
    inter[1::2] = right
    import wave as wavlib
    buf = io.BytesIO()
    with wavlib.open(buf, "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(8000)
        w.writeframes(inter.tobytes())
    with pytest.warns(UserWarning, match="channels"):
        pcm, rate = uio.decode_wav(buf.getvalue(), where="stereo")
    assert rate == 8000
    assert np.array_equal(pcm, left)


def test_wav_rejects_non_pcm16():
    import wave as wavlib
    buf = io.BytesIO()
    with wavlib.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(1)  # 8-bit
        w.setframerate(8000)
        w.writeframes(b"\x00" * 16)
    with pytest.raises(uio.ShardFormatError, match="16-bit"):
        uio.decode_wav(buf.getvalue())


def test_read_raw_roundtrip(tmp_path, rng):
    records = make_records(5, rng)
    entries = []
    for rec in records:
        path = tmp_path / f"{rec.key}.wav"
        path.write_bytes(uio.encode_wav(rec.pcm, rec.sample_rate))
        entries.append(uio.DataListEntry(rec.key, str(path), rec.speaker))
    back = list(uio.read_raw(entries))
    assert all(np.array_equal(a.pcm, b.pcm) for a, b in zip(records, back))
    assert [r.speaker for r in back] == [r.speaker for r in records]


def test_read_raw_missing_file_names_key(tmp_path):
    entry = uio.DataListEntry("lost", str(tmp_path / "gone.wav"), "s")
    with pytest.raises(uio.UioError, match="lost"):
        list(uio.read_raw([entry]))


def test_data_list_roundtrip(tmp_path):
    entries = [uio.DataListEntry(f"k{i}", f"/tmp/{i}.wav", f"s{i}") for i in range(4)]
    path = tmp_path / "data.list"
    uio.write_data_list(entries, path)
    assert list(uio.read_data_list(path)) == entries


def test_data_list_bad_line(tmp_path):
    path = tmp_path / "data.list"
    path.write_text('{"key": "a", "wav": "x.wav"}\n')  # missing speaker
    with pytest.raises(uio.UioError, match="data.list:1"):
        list(uio.read_data_list(path))


def test_partition_identity_and_sizes():
    manifest = uio.ShardManifest([f"s{i}.tar" for i in range(10)],
                                 list(range(10)))
    assert uio.partition(manifest, 0, 1).shard_paths == manifest.shard_paths
    sizes = sorted(len(uio.partition(manifest, w, 3).shard_paths)
                   for w in range(3))
    assert sizes == [3, 3, 4]


def test_partition_union_disjoint_exhaustive():
    for n_shards, workers in itertools.product(range(1, 21), range(1, 6)):
        manifest = uio.ShardManifest([f"s{i}" for i in range(n_shards)])
        parts = [uio.partition(manifest, w, workers).shard_paths
                 for w in range(workers)]
        flat = [p for part in parts for p in part]
        assert sorted(flat) == sorted(manifest.shard_paths)
        assert len(flat) == len(set(flat))


def test_partition_bad_worker():
    manifest = uio.ShardManifest(["a"])
    with pytest.raises(ValueError):
        uio.partition(manifest, 2, 2)


def test_shards_list_roundtrip(tmp_path):
    manifest = uio.ShardManifest(["/a/b.tar", "/c/d.tar"])
    path = tmp_path / "shards.list"
    uio.write_shards_list(manifest, path)
    assert uio.read_shards_list(path).shard_paths == manifest.shard_paths


def _peak_read_bytes(manifest):
    tracemalloc.start()
    count = 0
    for rec in uio.read_shards(manifest):
        count += 1
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return peak, count


def test_streaming_memory_bound(tmp_path, rng):
    """Reader peak memory must not scale with dataset size."""
    small = uio.pack_shards(make_records(1, rng, min_len=500, max_len=500),
                            1, tmp_path / "small")
    big = uio.pack_shards(
        make_records(2000, rng, min_len=500, max_len=500, prefix="big"),
        200, tmp_path / "big")
    peak_small, n_small = _peak_read_bytes(small)
    peak_big, n_big = _peak_read_bytes(big)
    assert (n_small, n_big) == (1, 2000)
    assert peak_big < 2 * peak_small
