"""End-to-end pipeline commands.

Subcommands: gen, train-clf, train-ae, protect, eval-privacy, eval-asv,
report. Every stage reads/writes plain-text artifacts under one output
directory and derives its randomness from the master seed mixed with the
stage name, so reruns with the same seed are byte-identical (reports
carry no timestamps).

Exit codes: 0 success, 1 usage/configuration error, 2 data or parse
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autoencoder, calibration, classifier, corpus, metrics, plda
from .autoencoder import TrainConfig
from .calibration import ScoreSet
from .corpus import SynthConfig
from .errors import ConfigError, DataError, NumericalError, ParseError, VeilvecError
from .preprocess import fit_standardizer, preprocess


@dataclass
class PipelineConfig:
    """Everything one experiment needs; mirrors the key=value config file."""

    out: Path = Path("veilvec-out")
    seed: int = 20260808

    # synthetic corpus (reference desk scale)
    n_speakers: int = 200
    segments_per_speaker: int = 40
    dim: int = 512
    attribute_shift: float = 2.0
    speaker_spread: float = 0.27
    within_spread: float = 0.07
    speaker_rank: int = 32
    within_rank: int = 60
    within_structured_spread: float = 0.36

    # speaker-disjoint split: classifier-train / autoencoder-train / test
    split_clf: float = 0.40
    split_ae: float = 0.35
    split_test: float = 0.25

    # attribute classifier
    clf_epochs: int = 20
    clf_lr: float = 1e-2
    clf_batch_size: int = 256

    # adversarial autoencoder
    ae_epochs: int = 260
    ae_lr: float = 2e-3
    ae_warmup_lr: float = 0.3
    ae_adv_lr: float = 2e-3
    ae_adv_start_epoch: int = 120
    ae_momentum: float = 0.9
    ae_batch_size: int = 128
    ae_bn_momentum: float = 0.1

    # evaluation
    protect_w: float = 0.5
    mi_k: int = 3
    hist_bin_width: float = 0.02
    cal_bin_width: float = 0.02
    lda_dim: int = 128
    plda_iters: int = 10
    trials_nontarget: int = 3

    def __post_init__(self):
        self.out = Path(self.out)
        if not 0.0 <= self.protect_w <= 1.0:
            raise ConfigError("protect_w must lie in [0,1]")
        if abs(self.split_clf + self.split_ae + self.split_test - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")

    def synth_config(self) -> SynthConfig:
        spk_rank = self.speaker_rank if self.speaker_rank > 0 else None
        win_rank = self.within_rank if self.within_rank > 0 else None
        return SynthConfig(self.n_speakers, self.segments_per_speaker,
                           self.dim, self.attribute_shift, self.speaker_spread,
                           self.within_spread, stage_seed(self.seed, "gen"),
                           speaker_rank=spk_rank, within_rank=win_rank,
                           within_structured_spread=self.within_structured_spread)

    def ae_config(self) -> TrainConfig:
        return TrainConfig(lr=self.ae_lr, momentum=self.ae_momentum,
                           batch_size=self.ae_batch_size, epochs=self.ae_epochs,
                           seed=stage_seed(self.seed, "ae"),
                           bn_momentum=self.ae_bn_momentum,
                           adv_lr=self.ae_adv_lr,
                           adv_start_epoch=self.ae_adv_start_epoch,
                           warmup_lr=self.ae_warmup_lr)

    # artifact locations
    def corpus_path(self, name):
        return self.out / "corpora" / f"{name}.txt"

    def model_path(self, name):
        return self.out / "models" / name

    def report_path(self, name):
        return self.out / "reports" / name


_INT_KEYS = {"seed", "n_speakers", "segments_per_speaker", "dim",
             "speaker_rank", "within_rank", "clf_epochs", "clf_batch_size",
             "ae_epochs", "ae_batch_size", "ae_adv_start_epoch", "mi_k", "lda_dim", "plda_iters",
             "trials_nontarget"}
_FLOAT_KEYS = {"attribute_shift", "speaker_spread", "within_spread",
               "within_structured_spread", "split_clf", "split_ae",
               "split_test", "clf_lr", "ae_lr", "ae_warmup_lr", "ae_adv_lr", "ae_momentum",
               "ae_bn_momentum", "protect_w", "hist_bin_width",
               "cal_bin_width"}


def load_config(path) -> PipelineConfig:
    """Parse a `key = value` config file (# starts a comment)."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"expected 'key = value', got {line!r}",
                                 line=lineno, path=path)
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key == "out":
                values[key] = Path(value)
            else:
                raise ParseError(f"unknown config key {key!r}", line=lineno,
                                 path=path)
    return PipelineConfig(**values)


def stage_seed(master: int, stage: str) -> int:
    """Per-stage seed: stage name hashed into the master seed."""
    digest = hashlib.sha256(f"{master}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# stages


def cmd_gen(cfg: PipelineConfig) -> None:
    full = corpus.generate(cfg.synth_config())
    parts = corpus.split(full, (cfg.split_clf, cfg.split_ae, cfg.split_test),
                         stage_seed(cfg.seed, "split"), by_speaker=True)
    cfg.corpus_path("train_clf").parent.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train_clf", "train_ae", "test"), parts):
        corpus.save(part, cfg.corpus_path(name))
        print(f"gen: wrote {cfg.corpus_path(name)} "
              f"({len(part)} segments, {len(part.speakers())} speakers)")


def _load_split(cfg, name):
    return corpus.load(cfg.corpus_path(name))


def cmd_train_clf(cfg: PipelineConfig) -> None:
    train_clf = _load_split(cfg, "train_clf")
    train_ae = _load_split(cfg, "train_ae")
    stats = fit_standardizer(train_ae)

    prepped = train_clf.with_vectors(preprocess(stats, train_clf.vectors))
    clf = classifier.train(prepped, epochs=cfg.clf_epochs, lr=cfg.clf_lr,
                           batch_size=cfg.clf_batch_size,
                           seed=stage_seed(cfg.seed, "clf"))
    cfg.model_path("classifier.txt").parent.mkdir(parents=True, exist_ok=True)
    classifier.save(clf, cfg.model_path("classifier.txt"))

    # calibrate on the held-out autoencoder-training split
    raw = classifier.score(clf, preprocess(stats, train_ae.vectors))
    cal_map = calibration.pav_fit(raw, train_ae.labels)
    calibration.save_map(cal_map, cfg.model_path("calibration.txt"))
    calibration.save_scores(cfg.model_path("train_ae_scores.txt"),
                            train_ae.segment_ids, train_ae.labels, raw,
                            calibration.apply(cal_map, raw))
    print(f"train-clf: wrote {cfg.model_path('classifier.txt')} and "
          f"{cfg.model_path('calibration.txt')}")


def _soft_posteriors(cfg, clf, cal_map, stats, part):
    raw = classifier.score(clf, preprocess(stats, part.vectors))
    return calibration.apply(cal_map, raw)


def cmd_train_ae(cfg: PipelineConfig) -> None:
    train_ae = _load_split(cfg, "train_ae")
    test = _load_split(cfg, "test")
    clf = classifier.load(cfg.model_path("classifier.txt"))
    cal_map = calibration.load_map(cfg.model_path("calibration.txt"))
    stats = fit_standardizer(train_ae)

    with_post = train_ae.with_posteriors(
        _soft_posteriors(cfg, clf, cal_map, stats, train_ae))
    val = test.with_posteriors(_soft_posteriors(cfg, clf, cal_map, stats, test))
    model = autoencoder.train(with_post, cfg.ae_config(), val_corpus=val)
    autoencoder.save(model, cfg.model_path("ae.txt"))
    _write_json(cfg.report_path("ae_train_log.json"), model.train_log)
    last = model.train_log[-1] if model.train_log else {}
    print(f"train-ae: wrote {cfg.model_path('ae.txt')} "
          f"(final epoch: {json.dumps(last, sort_keys=True)})")


def cmd_protect(cfg: PipelineConfig, w: float | None = None,
                which: str = "test") -> None:
    w = cfg.protect_w if w is None else w
    if not 0.0 <= w <= 1.0:
        raise ConfigError("protection condition w must lie in [0,1]")
    part = _load_split(cfg, which)
    model = autoencoder.load(cfg.model_path("ae.txt"))
    protected = part.with_vectors(autoencoder.protect(model, part.vectors, w))
    out = cfg.out / "protected" / f"{which}_w{w:g}.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.save(protected, out)
    print(f"protect: wrote {out}")


def _condition_vectors(cfg, test, model, clf, cal_map):
    """Vectors per evaluation condition, all in the preprocessed space."""
    stats = model.stats
    original = preprocess(stats, test.vectors)
    y_soft = calibration.apply(cal_map, classifier.score(clf, original))
    return {
        "original": original,
        "reconstructed_w_soft": autoencoder.protect(model, test.vectors, y_soft),
        "protected": autoencoder.protect(model, test.vectors, cfg.protect_w),
    }


def _canonical_posteriors(raw_scores, labels):
    """Canonical-polarity posterior scores plus the swap flag.

    Swapping maps s to 1-s (rank-equivalent to negation, stays in [0,1]).
    """
    raw_set = ScoreSet(raw_scores[labels == 1], raw_scores[labels == 0])
    swapped = metrics.canonical_polarity(raw_set).swapped
    scores = 1.0 - raw_scores if swapped else raw_scores
    return ScoreSet(scores[labels == 1], scores[labels == 0]), scores, swapped


def cmd_eval_privacy(cfg: PipelineConfig) -> None:
    test = _load_split(cfg, "test")
    clf = classifier.load(cfg.model_path("classifier.txt"))
    cal_map = calibration.load_map(cfg.model_path("calibration.txt"))
    model = autoencoder.load(cfg.model_path("ae.txt"))
    labels = test.labels
    prior = float(labels.mean())

    report = {"conditions": {}, "protect_w": cfg.protect_w,
              "mi_k": cfg.mi_k, "n_test_segments": len(test)}
    for name, vectors in _condition_vectors(cfg, test, model, clf, cal_map).items():
        raw = classifier.score(clf, vectors)
        canon_set, canon_scores, swapped = _canonical_posteriors(raw, labels)
        zebra_report = metrics.zebra(canon_set)

        # oracle-calibrated posteriors of this condition's scores
        oracle_map = calibration.pav_fit(canon_scores, labels)
        oracle_posts = calibration.apply(oracle_map, canon_scores)
        # the train-time calibration map applied to raw scores, reported in
        # canonical polarity
        llrs = calibration.posterior_to_llr(calibration.apply(cal_map, raw),
                                            prior, len(raw))
        if swapped:
            llrs = -llrs
        centers, tar_hist, non_hist = metrics.score_histogram(
            ScoreSet(oracle_posts[labels == 1], oracle_posts[labels == 0]),
            cfg.hist_bin_width)

        report["conditions"][name] = {
            "auc": round(metrics.auc(canon_set), 6),
            "eer": round(metrics.eer(canon_set), 6),
            "cllr": round(metrics.cllr(llrs[labels == 1], llrs[labels == 0]), 6),
            "cllr_min": round(metrics.cllr_min(canon_set), 6),
            "d_ece": round(zebra_report.d_ece, 6),
            "log10_lw": round(zebra_report.log10_lw, 6),
            "tag": zebra_report.tag,
            "mi_avg_bits": round(metrics.mutual_information(
                vectors, labels, k=cfg.mi_k), 8),
            "polarity_swapped": swapped,
            "histogram": {
                "bin_centers": [round(c, 6) for c in centers],
                "target_counts": [int(c) for c in tar_hist],
                "nontarget_counts": [int(c) for c in non_hist],
            },
            "calibration_plot": {
                "raw": [[round(v, 6) for v in row[:2]] + [row[2]]
                        for row in calibration.calibration_plot(
                            canon_scores, labels, cfg.cal_bin_width)],
                "oracle": [[round(v, 6) for v in row[:2]] + [row[2]]
                           for row in calibration.calibration_plot(
                               oracle_posts, labels, cfg.cal_bin_width)],
            },
        }
    _write_json(cfg.report_path("privacy.json"), report)
    for name, row in report["conditions"].items():
        print(f"eval-privacy: {name}: auc={row['auc']} cllr_min={row['cllr_min']} "
              f"zebra=({row['d_ece']}, {row['log10_lw']}, {row['tag']}) "
              f"mi={row['mi_avg_bits']}")


def cmd_eval_asv(cfg: PipelineConfig) -> None:
    train_clf = _load_split(cfg, "train_clf")
    train_ae = _load_split(cfg, "train_ae")
    test = _load_split(cfg, "test")
    clf = classifier.load(cfg.model_path("classifier.txt"))
    cal_map = calibration.load_map(cfg.model_path("calibration.txt"))
    model = autoencoder.load(cfg.model_path("ae.txt"))

    # backend trained on preprocessed original vectors of both train splits
    ids = train_clf.segment_ids + train_ae.segment_ids
    spk = train_clf.speaker_ids + train_ae.speaker_ids
    lab = np.concatenate([train_clf.labels, train_ae.labels])
    vec = np.vstack([train_clf.vectors, train_ae.vectors])
    backend_corpus = corpus.Corpus(cfg.dim, ids, spk, lab,
                                   preprocess(model.stats, vec))
    k = min(cfg.lda_dim, len(backend_corpus.speakers()) - 1)
    lda = plda.lda_fit(backend_corpus, k)
    plda_model = plda.plda_fit(plda.project_corpus(lda, backend_corpus),
                               iters=cfg.plda_iters)

    trials = plda.build_trials(test, stage_seed(cfg.seed, "trials"),
                               n_nontarget=cfg.trials_nontarget)
    plda.save_trials(trials, cfg.out / "protected" / "trials.txt")

    report = {"lda_dim": k, "plda_iters": cfg.plda_iters,
              "n_trials": len(trials), "conditions": {}}
    for name, vectors in _condition_vectors(cfg, test, model, clf, cal_map).items():
        cond = test.with_vectors(vectors)
        scores = plda.run_trials(plda_model, lda, cond, trials)
        report["conditions"][name] = {
            "eer": round(metrics.eer(scores), 6),
            "cllr": round(metrics.cllr(scores.target_scores,
                                       scores.nontarget_scores), 6),
            "cllr_min": round(metrics.cllr_min(scores), 6),
            "n_target": len(scores.target_scores),
            "n_nontarget": len(scores.nontarget_scores),
        }
    _write_json(cfg.report_path("asv.json"), report)
    for name, row in report["conditions"].items():
        print(f"eval-asv: {name}: eer={row['eer']} cllr_min={row['cllr_min']}")


def cmd_report(cfg: PipelineConfig) -> None:
    merged = {"settings": {
        "seed": cfg.seed, "n_speakers": cfg.n_speakers,
        "segments_per_speaker": cfg.segments_per_speaker, "dim": cfg.dim,
        "attribute_shift": cfg.attribute_shift, "protect_w": cfg.protect_w,
    }}
    for section, filename in (("privacy", "privacy.json"), ("asv", "asv.json")):
        path = cfg.report_path(filename)
        if not path.exists():
            raise DataError(f"missing {path}; run eval-{section} first")
        with open(path, "r", encoding="utf-8") as fh:
            merged[section] = json.load(fh)
    _write_json(cfg.report_path("report.json"), merged)
    print(f"report: wrote {cfg.report_path('report.json')}")


def run_all(cfg: PipelineConfig) -> None:
    cmd_gen(cfg)
    cmd_train_clf(cfg)
    cmd_train_ae(cfg)
    cmd_protect(cfg)
    cmd_eval_privacy(cfg)
    cmd_eval_asv(cfg)
    cmd_report(cfg)


# ---------------------------------------------------------------------------
# argument handling


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="veilvec",
                     description="attribute concealment pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = ("gen", "train-clf", "train-ae", "protect", "eval-privacy",
                "eval-asv", "report", "run-all")
    for name in commands:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None,
                       help="key=value config file")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed override")
        p.add_argument("--out", type=Path, default=None,
                       help="output directory override")
        if name == "protect":
            p.add_argument("--w", type=float, default=None,
                           help="decoder condition in [0,1] (default 0.5)")
            p.add_argument("--which", default="test",
                           choices=("train_clf", "train_ae", "test"))
    return parser


def _resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "gen":
            cmd_gen(cfg)
        elif args.command == "train-clf":
            cmd_train_clf(cfg)
        elif args.command == "train-ae":
            cmd_train_ae(cfg)
        elif args.command == "protect":
            cmd_protect(cfg, w=args.w, which=args.which)
        elif args.command == "eval-privacy":
            cmd_eval_privacy(cfg)
        elif args.command == "eval-asv":
            cmd_eval_asv(cfg)
        elif args.command == "report":
            cmd_report(cfg)
        elif args.command == "run-all":
            run_all(cfg)
    except ConfigError as exc:
        print(f"veilvec: configuration error: {exc}", file=sys.stderr)
        return 1
    except (ParseError, DataError, FileNotFoundError) as exc:
        print(f"veilvec: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"veilvec: numerical failure: {exc}", file=sys.stderr)
        return 3
    except VeilvecError as exc:  # pragma: no cover - safety net
        print(f"veilvec: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
