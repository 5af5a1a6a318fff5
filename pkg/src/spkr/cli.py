"""Single-binary command line interface.

Results go to stdout (machine-parsable: percentages with 2 decimals,
scores with 6), logs go to stderr, and every subcommand is reproducible:
identical inputs plus the same ``--seed`` give byte-identical output.
Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import logging
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import backend, diarize, embedder, featpipe, losses, tensorio, uio
from .config import ConfigError, apply_flat, load_config

log = logging.getLogger("spkr")


@dataclass
class DiarizeConfig:
    diar_window: float = 1.5
    diar_shift: float = 0.75
    diar_min_len: float = 0.25
    diar_prune: float = 0.3
    diar_max_speakers: int = 8


@dataclass
class CliConfig:
    pipeline: featpipe.PipelineConfig
    scheduler: losses.SchedulerConfig
    loss: losses.MarginLossConfig
    tdnn: embedder.TdnnSpec
    diar: DiarizeConfig


def _load_configs(args) -> CliConfig:
    """One flat key namespace feeds every module config; flags given as
    ``--set key=value`` override the file and unknown keys are rejected."""
    flat = load_config(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        flat[key.strip()] = value.strip()
    consumed: set = set()
    pipeline = featpipe.PipelineConfig.from_flat(flat, consumed)
    scheduler = losses.SchedulerConfig.from_flat(flat, consumed)
    loss = losses.MarginLossConfig.from_flat(flat, consumed)
    tdnn = embedder.TdnnSpec.from_flat(flat, consumed, input_dim=pipeline.num_mels)
    diar = DiarizeConfig()
    apply_flat(diar, flat, consumed)
    unknown = set(flat) - consumed
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return CliConfig(pipeline, scheduler, loss, tdnn, diar)


def _records_from_args(args):
    if getattr(args, "data_list", None):
        return uio.read_raw(uio.read_data_list(args.data_list))
    if getattr(args, "shards_list", None):
        return uio.read_shards(uio.read_shards_list(args.shards_list))
    raise ConfigError("need --data-list or --shards-list")


def _scan_speakers(args):
    if getattr(args, "data_list", None):
        return featpipe.build_speaker_table(
            e.speaker for e in uio.read_data_list(args.data_list))
    return featpipe.build_speaker_table(
        r.speaker for r in uio.read_shards(uio.read_shards_list(args.shards_list)))


def _read_utt2spk(path) -> dict:
    table = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'key speaker'")
            table[parts[0]] = parts[1]
    return table


def _read_embeddings_grouped(path, average: bool) -> dict:
    """Embedding text file -> key -> vector; repeated keys are averaged
    (multi-session enrollment) when ``average`` is on."""
    grouped: dict = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            grouped.setdefault(parts[0], []).append(
                np.array([float(p) for p in parts[1:]]))
    out = {}
    for key, vecs in grouped.items():
        if len(vecs) > 1 and average:
            out[key] = backend.enroll_average(vecs)
        else:
            out[key] = vecs[-1]
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_shards(args):
    cfg = _load_configs(args)  # rejects unknown keys even when unused here
    del cfg
    records = uio.read_raw(uio.read_data_list(args.data_list))
    manifest = uio.pack_shards(records, args.shard_size, args.out_dir,
                               gzip=args.gzip, prefix=args.prefix)
    for path in manifest.shard_paths:
        sys.stdout.write(path + "\n")
    log.info("wrote %d shards, %d utterances", len(manifest.shard_paths),
             sum(manifest.total_utterances))
    return 0


def cmd_pipeline_dump(args):
    cfg = _load_configs(args)
    rng = np.random.default_rng(args.seed)
    table = _scan_speakers(args)
    noise_bank = (featpipe.AugmentBank.from_map_file(args.noise_bank)
                  if args.noise_bank else None)
    rir_bank = (featpipe.AugmentBank.from_map_file(args.rir_bank)
                if args.rir_bank else None)
    batches = featpipe.run_pipeline(_records_from_args(args), cfg.pipeline,
                                    table, rng, noise_bank, rir_bank)
    tensors = {}
    for i, batch in enumerate(batches):
        if args.max_batches is not None and i >= args.max_batches:
            break
        name = f"batch{i:06d}"
        tensors[name] = batch.feats
        sys.stdout.write(f"{name} {' '.join(str(d) for d in batch.feats.shape)}\n")
    tensorio.write_tensors(args.out, tensors)
    log.info("dumped %d batches to %s", len(tensors), args.out)
    return 0


def _extract_pairs(args, cfg):
    weights = tensorio.read_tensors(args.weights)
    embedder.validate_weights(cfg.tdnn, weights)
    records = list(_records_from_args(args))

    def embed_one(rec):
        feats = featpipe.featurize(rec.pcm, rec.sample_rate, cfg.pipeline)
        return rec.key, embedder.forward(feats, cfg.tdnn, weights)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            return list(pool.map(embed_one, records))
    return [embed_one(r) for r in records]


def cmd_extract(args):
    cfg = _load_configs(args)
    pairs = _extract_pairs(args, cfg)
    if args.format == "wstn":
        if not args.out:
            raise ConfigError("--format wstn requires --out")
        tensorio.write_tensors(args.out, dict(pairs))
    else:
        if args.out:
            with open(args.out, "w", encoding="utf-8") as f:
                embedder.write_embeddings_text(pairs, f)
        else:
            embedder.write_embeddings_text(pairs, sys.stdout)
    log.info("extracted %d embeddings", len(pairs))
    return 0


def cmd_fit_head(args):
    cfg = _load_configs(args)
    embeddings = embedder.read_embeddings_text(args.embeddings)
    utt2spk = _read_utt2spk(args.utt2spk)
    keys = list(embeddings)
    speakers = featpipe.build_speaker_table(utt2spk[k] for k in keys)
    X = np.stack([embeddings[k] for k in keys])
    y = np.array([speakers[utt2spk[k]] for k in keys])
    loss_cfg = cfg.loss
    loss_cfg.num_classes = len(speakers)
    loss_cfg.embed_dim = X.shape[1]
    params, trace = losses.fit_head(X, y, loss_cfg, cfg.scheduler,
                                    epochs=args.epochs, seed=args.seed)
    for t, value in enumerate(trace):
        sys.stdout.write(f"iter {t} loss {value:.6f}\n")
    acc = losses.head_accuracy(X, y, params)
    sys.stdout.write(f"accuracy {100.0 * acc:.2f}\n")
    if args.out:
        tensorio.write_tensors(args.out, {"head.weight": params.W})
    return 0


def _scored_trials(trials, enroll, test, score_fn):
    scored = []
    for trial in trials:
        if trial.enroll_key not in enroll:
            raise ValueError(f"no enrollment embedding for {trial.enroll_key}")
        if trial.test_key not in test:
            raise ValueError(f"no test embedding for {trial.test_key}")
        scored.append((trial, score_fn(enroll[trial.enroll_key],
                                       test[trial.test_key])))
    return scored


def cmd_score_cosine(args):
    _load_configs(args)
    enroll = _read_embeddings_grouped(args.enroll, average=True)
    test = _read_embeddings_grouped(args.test, average=False)
    trials = backend.read_trials(args.trials)
    scored = _scored_trials(trials, enroll, test, backend.cosine_score)
    backend.write_scores(scored, sys.stdout)
    return 0


def cmd_train_plda(args):
    _load_configs(args)
    embeddings = embedder.read_embeddings_text(args.embeddings)
    utt2spk = _read_utt2spk(args.utt2spk)
    groups: dict = {}
    for key, vec in embeddings.items():
        groups.setdefault(utt2spk[key], []).append(vec)
    groups = {spk: np.stack(vecs) for spk, vecs in groups.items()}
    model, trace = backend.plda_train(groups, iters=args.iters,
                                      do_length_norm=not args.no_length_norm,
                                      reg=args.reg)
    for i, value in enumerate(trace):
        sys.stdout.write(f"iter {i} loglik {value:.6f}\n")
    tensorio.write_tensors(args.out, {
        "mu": model.mu, "sigma_b": model.sigma_b, "sigma_w": model.sigma_w,
    })
    return 0


def cmd_score_plda(args):
    _load_configs(args)
    tensors = tensorio.read_tensors(args.plda)
    model = backend.PldaModel(
        mu=tensors["mu"].astype(np.float64),
        sigma_b=tensors["sigma_b"].astype(np.float64),
        sigma_w=tensors["sigma_w"].astype(np.float64),
    )
    enroll = _read_embeddings_grouped(args.enroll, average=True)
    test = _read_embeddings_grouped(args.test, average=False)
    trials = backend.read_trials(args.trials)
    norm = not args.no_length_norm

    def score_fn(e, t):
        return backend.plda_score(model, e, t, do_length_norm=norm)

    scored = _scored_trials(trials, enroll, test, score_fn)
    backend.write_scores(scored, sys.stdout)
    return 0


def cmd_asnorm(args):
    _load_configs(args)
    raw_rows = backend.read_scores(args.scores)
    raw = [(backend.Trial(e, t), s) for e, t, s in raw_rows]
    enroll_cohort = backend.group_scores_by_first_key(
        backend.read_scores(args.enroll_cohort))
    test_cohort = backend.group_scores_by_first_key(
        backend.read_scores(args.test_cohort))
    normalized = backend.asnorm(raw, enroll_cohort, test_cohort, args.top_n)
    backend.write_scores(normalized, sys.stdout)
    return 0


def cmd_metrics(args):
    _load_configs(args)
    trials = backend.read_trials(args.trials)
    scores = {(e, t): s for e, t, s in backend.read_scores(args.scores)}
    scored = []
    for trial in trials:
        pair = (trial.enroll_key, trial.test_key)
        if pair not in scores:
            raise ValueError(f"no score for trial {pair[0]} {pair[1]}")
        scored.append((trial, scores[pair]))
    eer_value, _ = backend.eer(scored)
    dcf_value, _ = backend.min_dcf(scored, p_target=args.p_target)
    sys.stdout.write(f"EER {100.0 * eer_value:.2f}\n")
    sys.stdout.write(f"minDCF {dcf_value:.6f}\n")
    return 0


def _read_wav_scp(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'recording wav_path'")
            out.append((parts[0], parts[1]))
    return out


def _diarize_recording(rec, wav_path, sad, cfg, weights, args):
    segments = [s for s in sad if s.recording_id == rec]
    if not segments:
        return []
    windows = diarize.subsegment(segments, window=cfg.diar.diar_window,
                                 shift=cfg.diar.diar_shift,
                                 min_len=cfg.diar.diar_min_len)
    if not windows:
        return []
    with open(wav_path, "rb") as f:
        pcm, rate = uio.decode_wav(f.read(), where=wav_path)
    vectors = []
    for w in windows:
        lo = int(round(w.start * rate))
        hi = int(round(w.end * rate))
        feats = featpipe.featurize(pcm[lo:hi], rate, cfg.pipeline)
        vectors.append(embedder.forward(feats, cfg.tdnn, weights))
    aff = diarize.affinity(np.stack(vectors), prune_fraction=cfg.diar.diar_prune)
    labels = diarize.spectral_cluster(
        aff, num_speakers=args.num_speakers,
        max_speakers=cfg.diar.diar_max_speakers,
        seed=[args.seed, zlib.crc32(rec.encode("utf-8"))],
    )
    return diarize.merge_segments(windows, labels)


def cmd_diarize(args):
    cfg = _load_configs(args)
    weights = tensorio.read_tensors(args.weights)
    embedder.validate_weights(cfg.tdnn, weights)
    if args.sad:
        sad = diarize.read_sad(args.sad)
    elif args.oracle_rttm:
        sad = diarize.turns_to_sad(diarize.read_rttm(args.oracle_rttm))
    else:
        raise ConfigError("need --sad or --oracle-rttm")
    recordings = _read_wav_scp(args.recordings)

    def work(item):
        rec, path = item
        return _diarize_recording(rec, path, sad, cfg, weights, args)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(work, recordings))
    else:
        results = [work(item) for item in recordings]
    for turns in results:
        diarize.write_rttm(turns, sys.stdout)
    return 0


def cmd_der(args):
    _load_configs(args)
    report = diarize.compute_der(diarize.read_rttm(args.ref),
                                 diarize.read_rttm(args.hyp),
                                 collar=args.collar)
    sys.stdout.write(f"MISS {100.0 * report.miss:.2f}\n")
    sys.stdout.write(f"FA {100.0 * report.fa:.2f}\n")
    sys.stdout.write(f"SC {100.0 * report.sc:.2f}\n")
    sys.stdout.write(f"DER {100.0 * report.der:.2f}\n")
    return 0


def cmd_schedule_dump(args):
    cfg = _load_configs(args)
    sched = cfg.scheduler
    for t in range(0, sched.T, args.stride):
        lr = losses.lr_schedule(t, sched)
        margin = losses.margin_schedule(t, sched)
        sys.stdout.write(f"{t} {lr:.6f} {margin:.6f}\n")
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=0,
                     help="global random seed; identical seeds give "
                          "byte-identical outputs")
    sub.add_argument("--config", help="flat key = value config file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config key (repeatable)")
    sub.add_argument("--workers", type=int, default=1,
                     help="parallel workers where supported; output order "
                          "is restored")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spkr",
                     description="speaker verification and diarization toolkit")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("make-shards", parents=[], help="pack wavs into tar shards")
    _add_common(p)
    p.add_argument("--data-list", required=True, help="JSON-lines key/wav/speaker")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--shard-size", type=int, default=1000,
                   help="utterances per shard")
    p.add_argument("--gzip", action="store_true", help="gzip each shard")
    p.add_argument("--prefix", default="shard")
    p.set_defaults(func=cmd_make_shards)

    p = subs.add_parser("pipeline-dump",
                        help="run the feature pipeline, dump batches")
    _add_common(p)
    p.add_argument("--data-list")
    p.add_argument("--shards-list")
    p.add_argument("--noise-bank", help="path<TAB>category map file of noise wavs")
    p.add_argument("--rir-bank", help="path<TAB>category map file of impulse responses")
    p.add_argument("--out", required=True, help="output tensor container")
    p.add_argument("--max-batches", type=int)
    p.set_defaults(func=cmd_pipeline_dump)

    p = subs.add_parser("extract", help="extract speaker embeddings")
    _add_common(p)
    p.add_argument("--weights", required=True, help="tensor container of weights")
    p.add_argument("--data-list")
    p.add_argument("--shards-list")
    p.add_argument("--out", help="output file (default stdout)")
    p.add_argument("--format", choices=("text", "wstn"), default="text")
    p.set_defaults(func=cmd_extract)

    p = subs.add_parser("fit-head", help="train a classification head")
    _add_common(p)
    p.add_argument("--embeddings", required=True, help="embedding text file")
    p.add_argument("--utt2spk", required=True, help="'key speaker' lines")
    p.add_argument("--epochs", type=int, help="iterations (default scheduler T)")
    p.add_argument("--out", help="write head weights to this tensor container")
    p.set_defaults(func=cmd_fit_head)

    p = subs.add_parser("score-cosine", help="cosine-score trials")
    _add_common(p)
    p.add_argument("--enroll", required=True, help="enroll embeddings text")
    p.add_argument("--test", required=True, help="test embeddings text")
    p.add_argument("--trials", required=True, help="'enroll test label' lines")
    p.set_defaults(func=cmd_score_cosine)

    p = subs.add_parser("train-plda", help="EM-train the two-covariance PLDA")
    _add_common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--utt2spk", required=True)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--reg", type=float, default=0.0,
                   help="ridge added to the within covariance")
    p.add_argument("--no-length-norm", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_plda)

    p = subs.add_parser("score-plda", help="PLDA log-likelihood-ratio scoring")
    _add_common(p)
    p.add_argument("--plda", required=True, help="tensor container with mu/sigma_b/sigma_w")
    p.add_argument("--enroll", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--no-length-norm", action="store_true")
    p.set_defaults(func=cmd_score_plda)

    p = subs.add_parser("asnorm", help="adaptive symmetric score normalization")
    _add_common(p)
    p.add_argument("--scores", required=True, help="raw trial scores")
    p.add_argument("--enroll-cohort", required=True,
                   help="scores of enroll keys against the cohort")
    p.add_argument("--test-cohort", required=True,
                   help="scores of test keys against the cohort")
    p.add_argument("--top-n", type=int, required=True)
    p.set_defaults(func=cmd_asnorm)

    p = subs.add_parser("metrics", help="EER and minDCF from trials + scores")
    _add_common(p)
    p.add_argument("--trials", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--p-target", type=float, default=0.01)
    p.set_defaults(func=cmd_metrics)

    p = subs.add_parser("diarize", help="diarize recordings to RTTM")
    _add_common(p)
    p.add_argument("--recordings", required=True, help="'recording wav_path' lines")
    p.add_argument("--sad", help="'recording start end' speech regions")
    p.add_argument("--oracle-rttm", help="take speech regions from this reference")
    p.add_argument("--weights", required=True)
    p.add_argument("--num-speakers", type=int,
                   help="fix the speaker count instead of the eigengap pick")
    p.set_defaults(func=cmd_diarize)

    p = subs.add_parser("der", help="diarization error rate of hyp vs ref")
    _add_common(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--collar", type=float, default=0.25)
    p.set_defaults(func=cmd_der)

    p = subs.add_parser("schedule-dump",
                        help="print the lr/margin schedule table")
    _add_common(p)
    p.add_argument("--stride", type=int, default=1)
    p.set_defaults(func=cmd_schedule_dump)

    return parser


DATA_ERRORS = (
    uio.UioError, ConfigError, backend.PldaError, diarize.RttmError,
    embedder.WeightError, tensorio.TensorFormatError, ValueError, KeyError,
    OSError,
)


def run(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except DATA_ERRORS as e:
        sys.stderr.write(f"spkr: error: {e}\n")
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
