from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

from pydantic import BaseModel

from app.dataset.annotated import AnnotatedDataset, build_annotated, load_annotated, save_annotated
from app.dataset.pairs import (
    DatasetError,
    PreferencePair,
    load_jsonl,
    load_vocabulary,
    longest_example,
    save_jsonl,
    save_vocabulary,
)
from app.dataset.split import median_gap_split, write_split
from app.dataset.synthetic import default_vocabulary, generate_synthetic
from app.information.entropy import AnnotationError
from app.information.report import build_report, scatter_rows, summarize_by_label, write_report, write_scatter_csv
from app.losses.preference import LossVariant
from app.manifest import RunManifestDTO, input_file, write_manifest
from app.policy.model import ModelConfig, PolicyParameters, ReferenceSnapshot, init_params
from app.policy.params_io import config_path_for, load_params, save_params
from app.policy.vocab import Vocabulary
from app.training.config import OptimizerKind, SftConfig, TrainConfig
from app.training.experiments import (
    DEFAULT_ALPHAS,
    DEFAULT_SEEDS,
    alpha_sweep,
    split_margin_experiment,
    write_margin_curves_csv,
)
from app.training.gradcheck import GradcheckReport, run_gradcheck
from app.training.harness import NumericalError, evaluate, train, write_metrics_csv
from app.training.sft import supervised_warmup


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

VOCAB_FILE = "vocab.json"


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1 (argparse itself uses 2)."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Run:
    """Per-invocation bookkeeping: inputs, outputs and wall-clock timings for the manifest."""

    def __init__(self, command: str, argv: Sequence[str], out_dir: Path) -> None:
        self.out_dir = out_dir
        self.manifest = RunManifestDTO(command=command, argv=list(argv))
        self._start = time.perf_counter()

    def input(self, role: str, path: Path) -> None:
        self.manifest.inputs.append(input_file(role, path))

    def params_input(self, role: str, path: Path) -> None:
        self.input(role, path)
        self.input(f"{role}-config", config_path_for(path))

    def output(self, path: Path) -> None:
        self.manifest.outputs.append(path.name)

    def finish(self) -> None:
        self.manifest.timings["total_seconds"] = time.perf_counter() - self._start
        write_manifest(self.out_dir, self.manifest)


# --- shared helpers ---


def _vocab_path(args: argparse.Namespace) -> Path:
    if args.vocab is not None:
        return Path(args.vocab)
    return Path(args.dataset).parent / VOCAB_FILE


def _load_vocab(args: argparse.Namespace, run: _Run) -> Vocabulary:
    path = _vocab_path(args)
    if not path.exists():
        raise DatasetError(f"{path}: vocabulary not found (pass --vocab)")
    vocab = load_vocabulary(path)
    run.input("vocab", path)
    # Carry the vocabulary along so the next pipeline step finds it beside our outputs.
    save_vocabulary(run.out_dir / VOCAB_FILE, vocab)
    return vocab


def _load_model(path: Path, vocab: Vocabulary, role: str, run: _Run) -> PolicyParameters:
    params = load_params(path)
    if params.config.vocab_size != vocab.size or params.config.bos_id != vocab.bos_id:
        raise DatasetError(f"{path}: model vocabulary ({params.config.vocab_size}) does not match {vocab.size} symbols")
    run.params_input(role, path)
    return params


def _load_annotated(args: argparse.Namespace, vocab: Vocabulary, run: _Run) -> AnnotatedDataset:
    path = Path(args.dataset)
    data = load_annotated(path, vocab)
    run.input("dataset", path)
    run.manifest.dataset_fingerprint = data.reference_fingerprint
    run.manifest.timings["annotation_seconds"] = data.annotation_seconds
    return data


def _load_pairs(path: Path, vocab: Vocabulary, run: _Run, role: str = "dataset") -> list[PreferencePair]:
    pairs = load_jsonl(path, vocab)
    run.input(role, path)
    return pairs


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        variant=LossVariant.parse(args.loss),
        beta=args.beta,
        learning_rate=args.lr,
        alpha=args.alpha,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        optimizer=OptimizerKind.parse(args.optimizer),
    )


def _config_dict(config: object) -> dict:
    out = asdict(config)  # type: ignore[call-overload]
    return {k: (v.value if hasattr(v, "value") else v) for k, v in out.items()}


def _write_json(path: Path, dto: BaseModel) -> None:
    path.write_text(dto.model_dump_json(indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# --- subcommands ---


def cmd_gen_data(args: argparse.Namespace, run: _Run) -> int:
    vocab = default_vocabulary(args.vocab_size)
    pairs = generate_synthetic(args.seed, args.n_safe, args.n_unsafe, vocab)
    dataset_path = run.out_dir / "dataset.jsonl"
    save_jsonl(dataset_path, pairs, vocab)
    save_vocabulary(run.out_dir / VOCAB_FILE, vocab)
    run.output(dataset_path)
    run.output(run.out_dir / VOCAB_FILE)
    run.manifest.seed = args.seed
    run.manifest.config = {"n_safe": args.n_safe, "n_unsafe": args.n_unsafe, "vocab_size": args.vocab_size}
    logger.info("wrote %d pairs to %s (longest example %d tokens)", len(pairs), dataset_path, longest_example(pairs))
    return EXIT_OK


def cmd_init(args: argparse.Namespace, run: _Run) -> int:
    vocab = _load_vocab(args, run)
    pairs = _load_pairs(Path(args.dataset), vocab, run)
    window = args.context_window if args.context_window is not None else max(longest_example(pairs), 2)
    config = ModelConfig(
        vocab_size=vocab.size,
        embed_dim=args.embed_dim,
        context_window=window,
        hidden_dim=args.hidden_dim,
        seed=args.seed,
        bos_id=vocab.bos_id,
        init_scale=args.init_scale,
    )
    out = run.out_dir / "init.params"
    save_params(out, init_params(config))
    run.output(out)
    run.output(config_path_for(out))
    run.manifest.seed = args.seed
    run.manifest.config = asdict(config)
    return EXIT_OK


def cmd_sft(args: argparse.Namespace, run: _Run) -> int:
    vocab = _load_vocab(args, run)
    pairs = _load_pairs(Path(args.dataset), vocab, run)
    init = _load_model(Path(args.init_params), vocab, "init-params", run)
    config = SftConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        include_dispreferred=not args.preferred_only,
    )
    start = time.perf_counter()
    ref, losses = supervised_warmup(config, pairs, init)
    run.manifest.timings["training_seconds"] = time.perf_counter() - start

    out = run.out_dir / "ref.params"
    save_params(out, ref)
    loss_path = run.out_dir / "sft_loss.csv"
    _write_csv(loss_path, ("step", "loss"), [(i, repr(v)) for i, v in enumerate(losses, start=1)])
    for p in (out, config_path_for(out), loss_path):
        run.output(p)
    run.manifest.seed = args.seed
    run.manifest.config = _config_dict(config)
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace, run: _Run) -> int:
    vocab = _load_vocab(args, run)
    pairs = _load_pairs(Path(args.dataset), vocab, run)
    ref = ReferenceSnapshot.freeze(_load_model(Path(args.ref_params), vocab, "ref-params", run))

    data = build_annotated(pairs, ref, args.alpha, workers=args.workers)
    annotated_path = run.out_dir / "annotated.jsonl"
    save_annotated(annotated_path, data, vocab)

    items = [(r.pair, r.annotation) for r in data.records]
    summaries = summarize_by_label(items)
    report_path = run.out_dir / "report.json"
    write_report(
        report_path,
        build_report(
            summaries,
            reference_fingerprint=data.reference_fingerprint,
            alpha=data.alpha,
            annotation_seconds=data.annotation_seconds,
        ),
    )
    scatter_path = run.out_dir / "scatter.csv"
    write_scatter_csv(scatter_path, scatter_rows(items))

    for label, s in summaries.items():
        print(f"{label}: {s.fraction_preferred_higher:.4f} of {s.count} pairs have mi_preferred > mi_dispreferred")

    for p in (annotated_path, annotated_path.with_suffix(".meta.json"), report_path, scatter_path):
        run.output(p)
    run.manifest.config = {"alpha": args.alpha}
    run.manifest.dataset_fingerprint = data.reference_fingerprint
    run.manifest.timings["annotation_seconds"] = data.annotation_seconds
    return EXIT_OK


def cmd_split(args: argparse.Namespace, run: _Run) -> int:
    vocab = _load_vocab(args, run)
    data = _load_annotated(args, vocab, run)
    split = median_gap_split(data)
    for p in write_split(run.out_dir, data, split, vocab):
        run.output(p)
    run.manifest.config = {"per_label_medians": split.per_label_medians}
    return EXIT_OK


def cmd_train(args: argparse.Namespace, run: _Run) -> int:
    vocab = _load_vocab(args, run)
    data = _load_annotated(args, vocab, run)
    init = _load_model(Path(args.init_params), vocab, "init-params", run)
    config = _train_config(args)

    start = time.perf_counter()
    policy, rows = train(config, data, init)
    run.manifest.timings["training_seconds"] = time.perf_counter() - start

    out = run.out_dir / "policy.params"
    save_params(out, policy)
    metrics_path = run.out_dir / "metrics.csv"
    write_metrics_csv(metrics_path, rows)
    for p in (out, config_path_for(out), metrics_path):
        run.output(p)
    run.manifest.seed = config.seed
    run.manifest.config = _config_dict(config)
    return EXIT_OK


class EvalDTO(BaseModel):
    pairs: int
    beta: float
    preference_accuracy: float
    mean_margin: float


def cmd_eval(args: argparse.Namespace, run: _Run) -> int:
    vocab = _load_vocab(args, run)
    pairs = _load_pairs(Path(args.dataset), vocab, run)
    ref = ReferenceSnapshot.freeze(_load_model(Path(args.ref_params), vocab, "ref-params", run))
    policy = _load_model(Path(args.policy_params), vocab, "policy-params", run)
    result = evaluate(policy, ref, pairs, args.beta)

    out = run.out_dir / "eval.json"
    _write_json(
        out,
        EvalDTO(
            pairs=len(pairs),
            beta=args.beta,
            preference_accuracy=result.preference_accuracy,
            mean_margin=result.mean_margin,
        ),
    )
    print(f"preference_accuracy={result.preference_accuracy:.4f} mean_margin={result.mean_margin:.6g}")
    run.output(out)
    run.manifest.config = {"beta": args.beta}
    return EXIT_OK


class GradcheckReportDTO(BaseModel):
    seed: int
    trials: int
    fd_errors: dict[str, float]
    inner_analytic_error: float
    bdpo_analytic_error: float
    contract_error: float
    contract_total_difference: float
    passed: bool


def _gradcheck_to_dto(r: GradcheckReport) -> GradcheckReportDTO:
    return GradcheckReportDTO(
        seed=r.seed,
        trials=r.trials,
        fd_errors=r.fd_errors,
        inner_analytic_error=r.inner_analytic_error,
        bdpo_analytic_error=r.bdpo_analytic_error,
        contract_error=r.contract_error,
        contract_total_difference=r.contract_total_difference,
        passed=r.passed,
    )


def cmd_gradcheck(args: argparse.Namespace, run: _Run) -> int:
    report = run_gradcheck(args.seed, args.trials, fault=args.inject_fault)
    out = run.out_dir / "gradcheck.json"
    _write_json(out, _gradcheck_to_dto(report))
    run.output(out)
    run.manifest.seed = args.seed
    run.manifest.config = {"trials": args.trials}

    for variant, err in report.fd_errors.items():
        print(f"finite-difference {variant}: max relative error {err:.3e}")
    print(f"analytic inner vs autodiff: {report.inner_analytic_error:.3e}")
    print(f"analytic bdpo vs autodiff: {report.bdpo_analytic_error:.3e}")
    print(f"stop-gradient contract: {report.contract_error:.3e} (total-derivative gap {report.contract_total_difference:.3e})")
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def cmd_sweep(args: argparse.Namespace, run: _Run) -> int:
    vocab = _load_vocab(args, run)
    data = _load_annotated(args, vocab, run)
    init = _load_model(Path(args.init_params), vocab, "init-params", run)
    eval_pairs = _load_pairs(Path(args.eval_dataset), vocab, run, "eval-dataset") if args.eval_dataset else None
    config = _train_config(args)

    rows = alpha_sweep(config, data, init, args.alphas, eval_pairs)
    out = run.out_dir / "sweep.csv"
    _write_csv(
        out,
        ("alpha", "preference_accuracy", "mean_margin", "final_mean_loss"),
        [(repr(r.alpha), repr(r.preference_accuracy), repr(r.mean_margin), repr(r.final_mean_loss)) for r in rows],
    )
    run.output(out)
    run.manifest.seed = config.seed
    run.manifest.config = {**_config_dict(config), "alphas": list(args.alphas)}
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, run: _Run) -> int:
    vocab = _load_vocab(args, run)
    data = _load_annotated(args, vocab, run)
    init = _load_model(Path(args.init_params), vocab, "init-params", run)
    config = _train_config(args)

    results = split_margin_experiment(config, data, init, args.seeds)
    out = run.out_dir / "compare.csv"
    _write_csv(
        out,
        ("seed", "balanced_margin", "imbalanced_margin", "imbalanced_higher"),
        [(c.seed, repr(c.balanced_margin), repr(c.imbalanced_margin), int(c.imbalanced_higher)) for c in results],
    )
    curves = run.out_dir / "compare_metrics.csv"
    write_margin_curves_csv(curves, results)
    wins = sum(1 for c in results if c.imbalanced_higher)
    print(f"imbalanced margin >= balanced margin in {wins} of {len(results)} seeds")
    run.output(out)
    run.output(curves)
    run.manifest.config = {**_config_dict(config), "seeds": list(args.seeds)}
    return EXIT_OK


# --- parser ---


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    p.add_argument("--out-dir", required=True, help="directory for outputs and manifest.json")
    p.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    return p


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True)
    p.add_argument("--vocab", default=None, help=f"vocabulary JSON (default: {VOCAB_FILE} beside --dataset)")


def _train_flags(p: argparse.ArgumentParser, *, default_loss: str = "bdpo") -> None:
    p.add_argument("--init-params", required=True)
    p.add_argument("--loss", default=default_loss, choices=[v.value for v in LossVariant])
    p.add_argument("--alpha", type=float, default=1.5)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", default=OptimizerKind.ADAM.value, choices=[k.value for k in OptimizerKind])


Handler = Callable[[argparse.Namespace, _Run], int]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bdpo-lab", description="Balanced DPO desk-scale laboratory.", allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    def add(name: str, handler: Handler, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text, allow_abbrev=False)
        p.set_defaults(handler=handler)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic preference corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-safe", type=int, default=200)
    p.add_argument("--n-unsafe", type=int, default=200)
    p.add_argument("--vocab-size", type=int, default=16)

    p = add("init", cmd_init, "create seeded initial model parameters")
    _data_flags(p)
    p.add_argument("--embed-dim", type=int, default=8)
    p.add_argument("--hidden-dim", type=int, default=16)
    p.add_argument("--context-window", type=int, default=None, help="default: longest example in --dataset")
    p.add_argument("--init-scale", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)

    p = add("sft", cmd_sft, "supervised warm-up of a reference model")
    _data_flags(p)
    p.add_argument("--init-params", required=True)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preferred-only", action="store_true")

    p = add("analyze", cmd_analyze, "annotate pairs with reference-model MI and balanced weights")
    _data_flags(p)
    p.add_argument("--ref-params", required=True)
    p.add_argument("--alpha", type=float, default=1.5)
    p.add_argument("--workers", type=int, default=1)

    p = add("split", cmd_split, "median-gap split of an annotated dataset")
    _data_flags(p)

    p = add("train", cmd_train, "train a policy with one loss variant")
    _data_flags(p)
    _train_flags(p)

    p = add("eval", cmd_eval, "preference accuracy and mean reward margin")
    _data_flags(p)
    p.add_argument("--ref-params", required=True)
    p.add_argument("--policy-params", required=True)
    p.add_argument("--beta", type=float, default=0.1)

    p = add("gradcheck", cmd_gradcheck, "randomized gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    p = add("sweep", cmd_sweep, "train once per alpha and evaluate")
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--alphas", type=float, nargs="+", default=list(DEFAULT_ALPHAS))
    p.add_argument("--eval-dataset", default=None, help="held-out pairs (default: training pairs)")

    p = add("compare", cmd_compare, "train on the balanced and imbalanced halves per seed")
    _data_flags(p)
    _train_flags(p, default_loss="dpo")
    p.add_argument("--seeds", type=int, nargs="+", default=list(DEFAULT_SEEDS))

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    run = _Run(args.command, argv, Path(args.out_dir))
    run.out_dir.mkdir(parents=True, exist_ok=True)

    try:
        code = args.handler(args, run)
    except NumericalError as e:
        logger.error("numerical failure at step %d: %s", e.step, e)
        return EXIT_NUMERICAL
    except (ValueError, AnnotationError, OSError) as e:
        logger.error("%s", e)
        return EXIT_DATA
    run.finish()
    return code


if __name__ == "__main__":
    raise SystemExit(main())
