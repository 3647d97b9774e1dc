# cli.py
"""
styf command line: corpus synthesis, the three training phases, generation,
evaluation and hyperparameter selection.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
import contextlib
import logging
from pathlib import Path
from typing import Iterator, List, Optional

import numpy as np
import typer

from config import (
    DEFAULT_DOCS_PER_STYLE, DEFAULT_N_GEN, DEFAULT_SEED, DEFAULT_STYLES_PATH, DESK_CONFIG_PATH,
    HPARAM_GRID_PATH, RUNS_DIR, TrainConfig, load_hparam_grid, load_train_config, setup_logging,
)
from styles import console, err_console, metrics_table
from core import autograd as ag
from core.checkpoint import load_checkpoint, save_checkpoint, sidecar_path
from core.classify import classifier_accuracy, sample_labelled_features, train_style_classifiers
from core.corpus import (
    detokenize, load_corpus, load_style_specs, save_corpus, split_corpus, synth_corpus, tokenize,
)
from core.errors import ConfigurationError, MissingArtifactError, StyfError
from core.json_utils import dump_json
from core.manifest import RunManifest, sha256_file
from core.metrics import diversity_bounds, evaluate_generator, novelty_bounds, sample_eval_items
from core.models import Sampling, free_running_generate
from core.trainer import (
    TrainLog, ablation_configs, expand_grid, pretrain_comparator, pretrain_lm, select_hyperparams,
    train_generator,
)
from core.utils import group_by_style, make_downloads

logger = logging.getLogger("styf")

app = typer.Typer(add_completion=False, no_args_is_help=True, help="Style-example-guided paragraph generation.")


@app.callback()
def _main(log_level: Optional[str] = typer.Option(None, "--log-level", help="Override STYF_LOG_LEVEL.")):
    setup_logging(log_level)


@contextlib.contextmanager
def _exit_on_error() -> Iterator[None]:
    """
    Library errors become a one-line message and exit code 1.
    """
    try:
        yield
    except StyfError as e:
        err_console.print(f"[err]{type(e).__name__}:[/err] {e}")
        raise typer.Exit(code=1)
    except (ValueError, OSError) as e:
        err_console.print(f"[err]error:[/err] {e}")
        raise typer.Exit(code=1)


def _require(path: Path, producer: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(f"{path} not found; run `{producer}` first")
    return Path(path)


def _splits(corpus_path: Path, seed: int):
    corpus = load_corpus(corpus_path)
    return split_corpus(corpus, seed)


def _manifest(command: str, config: Optional[TrainConfig], corpus_path: Optional[Path]) -> RunManifest:
    return RunManifest(
        command=command,
        config=config.model_dump() if config else {},
        corpus_sha256=sha256_file(corpus_path) if corpus_path else None,
        seed=config.seed if config else None,
    )


# =============================================================================
# Corpus
# =============================================================================
@app.command("make-corpus")
def make_corpus(
    specs: Path = typer.Option(DEFAULT_STYLES_PATH, "--specs", help="StyleSpec JSON file."),
    docs_per_style: int = typer.Option(DEFAULT_DOCS_PER_STYLE, "--docs-per-style", min=1),
    seed: int = typer.Option(DEFAULT_SEED, "--seed"),
    out: Path = typer.Option(RUNS_DIR / "corpus.jsonl", "--out"),
):
    """Write a deterministic synthetic multi-style corpus as JSONL."""
    with _exit_on_error():
        corpus = synth_corpus(load_style_specs(specs), docs_per_style, seed)
        save_corpus(corpus, out)
        manifest = RunManifest(command="make-corpus", seed=seed, corpus_sha256=sha256_file(out),
                               config={"specs": str(specs), "docs_per_style": docs_per_style})
        manifest.finish(out.with_suffix(".manifest.json"), [out])
        console.print(f"[ok]wrote {len(corpus)} documents[/ok] ({corpus.label_counts()}) to {out}")


# =============================================================================
# Training phases
# =============================================================================
@app.command("pretrain-lm")
def pretrain_lm_cmd(
    config: Path = typer.Option(DESK_CONFIG_PATH, "--config"),
    corpus: Path = typer.Option(..., "--corpus"),
    out: Path = typer.Option(RUNS_DIR, "--out"),
    progress: bool = typer.Option(True, "--progress/--no-progress"),
):
    """Pretrain the left-to-right language model H."""
    with _exit_on_error():
        cfg = load_train_config(config, "pretrain-lm")
        train, val, _ = _splits(corpus, cfg.seed)
        manifest = _manifest("pretrain-lm", cfg, corpus)
        H, result = pretrain_lm(train, cfg, val_corpus=val, log=TrainLog(out / "lm_log.jsonl"), progress=progress)
        ckpt = save_checkpoint(out / "lm.styf", H, "lm", cfg.model, {"train_config": cfg.model_dump()})
        manifest.finish(out / "lm.manifest.json", [ckpt, sidecar_path(ckpt), out / "lm_log.jsonl"])
        console.print(f"[ok]H saved[/ok] to {ckpt} (val NLL {result['val_nll']:.4f})")


@app.command("pretrain-comparator")
def pretrain_comparator_cmd(
    config: Path = typer.Option(DESK_CONFIG_PATH, "--config"),
    corpus: Path = typer.Option(..., "--corpus"),
    out: Path = typer.Option(RUNS_DIR, "--out"),
    lm: Optional[Path] = typer.Option(None, "--lm", help="H checkpoint (default: OUT/lm.styf)."),
    shuffle_labels: bool = typer.Option(False, "--shuffle-labels", help="Control run with randomised labels."),
    progress: bool = typer.Option(True, "--progress/--no-progress"),
):
    """Pretrain the same-style comparator C on frozen H features."""
    with _exit_on_error():
        cfg = load_train_config(config, "pretrain-comparator")
        H, lm_config, _ = load_checkpoint(_require(lm or out / "lm.styf", "pretrain-lm"), expect="lm")
        cfg = cfg.model_copy(update={"model": lm_config})
        train, val, test = _splits(corpus, cfg.seed)
        manifest = _manifest("pretrain-comparator", cfg, corpus)
        C, result = pretrain_comparator(train, H, cfg, val_corpus=val, log=TrainLog(out / "comparator_log.jsonl"),
                                        shuffle_labels=shuffle_labels, progress=progress)
        ckpt = save_checkpoint(out / "comparator.styf", C, "comparator", lm_config,
                               {"train_config": cfg.model_dump(), "lm": str(lm or out / "lm.styf"),
                                "val_accuracy": result.best_accuracy, "shuffle_labels": shuffle_labels})
        manifest.finish(out / "comparator.manifest.json", [ckpt, sidecar_path(ckpt), out / "comparator_log.jsonl"])
        console.print(f"[ok]C saved[/ok] to {ckpt} (val accuracy {result.best_accuracy:.3f}, "
                      f"{result.steps_run} steps{', early stop' if result.stopped_early else ''})")


def _upstream(out: Path, lm: Optional[Path], comparator: Optional[Path]):
    lm_path = _require(lm or out / "lm.styf", "pretrain-lm")
    comparator_path = _require(comparator or out / "comparator.styf", "pretrain-comparator")
    H, lm_config, _ = load_checkpoint(lm_path, expect="lm")
    C, _, _ = load_checkpoint(comparator_path, expect="comparator")
    return H, lm_config, C, lm_path, comparator_path


def _save_generator(out: Path, tag: str, run, cfg: TrainConfig, lm_path: Path, comparator_path: Path) -> List[Path]:
    meta = {"train_config": cfg.model_dump(), "variant": cfg.model.variant,
            "lm": str(lm_path), "comparator": str(comparator_path), "final_fed": run.final_fed}
    gen = save_checkpoint(out / f"generator-{tag}.styf", run.bundle, "generator", run.bundle.config, meta)
    disc = save_checkpoint(out / f"discriminator-{tag}.styf", run.discriminator, "discriminator", cfg.model, meta)
    return [gen, sidecar_path(gen), disc, sidecar_path(disc)]


@app.command("train")
def train_cmd(
    config: Path = typer.Option(DESK_CONFIG_PATH, "--config"),
    corpus: Path = typer.Option(..., "--corpus"),
    out: Path = typer.Option(RUNS_DIR, "--out"),
    variant: str = typer.Option("D", "--variant", help="Style injection: none, A, B, C or D."),
    lm: Optional[Path] = typer.Option(None, "--lm"),
    comparator: Optional[Path] = typer.Option(None, "--comparator"),
    progress: bool = typer.Option(True, "--progress/--no-progress"),
):
    """Train the generator F with the two-stream objective."""
    if variant not in ("none", "A", "B", "C", "D"):
        raise typer.BadParameter(f"unknown variant {variant}", param_hint="--variant")
    with _exit_on_error():
        cfg = load_train_config(config, "train-generator", variant=variant)
        H, lm_config, C, lm_path, comparator_path = _upstream(out, lm, comparator)
        cfg = cfg.model_copy(update={"model": lm_config.model_copy(update={"variant": variant})})
        train, val, _ = _splits(corpus, cfg.seed)
        manifest = _manifest("train", cfg, corpus)
        log_path = out / f"train_{variant}_log.jsonl"
        run = train_generator(train, H, C, cfg, val_corpus=val, log=TrainLog(log_path), progress=progress)
        outputs = _save_generator(out, variant, run, cfg, lm_path, comparator_path)
        manifest.finish(out / f"train_{variant}.manifest.json", outputs + [log_path])
        console.print(f"[ok]generator ({variant}) saved[/ok] to {outputs[0]}")


# =============================================================================
# Generation and evaluation
# =============================================================================
def _warn(message: str) -> None:
    err_console.print(f"[warn]warning:[/warn] {message}")


def _read_text(value: str) -> str:
    p = Path(value)
    return p.read_text(encoding="utf-8") if p.is_file() else value


@app.command("generate")
def generate_cmd(
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    context: str = typer.Option(..., "--context", help="Context text or a file holding it."),
    reference: Path = typer.Option(..., "--reference", help="File with the style reference paragraph."),
    n_tokens: int = typer.Option(DEFAULT_N_GEN, "--n-tokens", min=1),
    top_k: int = typer.Option(1, "--top-k", min=1),
    temperature: float = typer.Option(1.0, "--temperature", min=1e-6),
    seed: int = typer.Option(DEFAULT_SEED, "--seed"),
    emit_features: Optional[Path] = typer.Option(None, "--emit-features", help="Write generated-span features (.npy)."),
):
    """Continue a context in the style of a reference paragraph."""
    with _exit_on_error():
        bundle, config, _ = load_checkpoint(checkpoint, expect="generator")
        ctx = tokenize(_read_text(context))
        ref = tokenize(reference.read_text(encoding="utf-8"))
        if len(ref) > config.max_len:
            _warn(f"reference truncated to its first {config.max_len} of {len(ref)} tokens")
            ref = ref[: config.max_len]
        if len(ctx) + n_tokens > config.max_len:
            keep = config.max_len - n_tokens
            if keep < 1:
                raise typer.BadParameter(f"--n-tokens must be < max_len {config.max_len}", param_hint="--n-tokens")
            _warn(f"context truncated to its last {keep} of {len(ctx)} tokens")
            ctx = ctx[-keep:]
        with ag.no_grad():
            tokens, feats = free_running_generate(ctx, ref, bundle, n_tokens, Sampling(top_k=top_k, temperature=temperature), seed)
        if emit_features:
            emit_features.parent.mkdir(parents=True, exist_ok=True)
            np.save(emit_features, feats.data)
        console.print(detokenize(tokens), markup=False)


def _lm_config(bundle):
    return bundle.config.model_copy(update={"variant": "none"})


def _evaluate_one(bundle, H, items, classifiers, div, nov, cfg: TrainConfig, style_names, progress: bool) -> dict:
    report = evaluate_generator(bundle, H, items, classifiers, div, nov, cfg.n_gen, style_names,
                                Sampling(top_k=cfg.top_k), cfg.seed, progress)
    return {**report.to_json(), "samples": report.samples}


@app.command("evaluate")
def evaluate_cmd(
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    corpus: Path = typer.Option(..., "--corpus"),
    n_samples: int = typer.Option(96, "--n-samples", min=1),
    out: Path = typer.Option(RUNS_DIR / "report.json", "--out"),
    drop_loss: List[str] = typer.Option([], "--drop-loss", help="Retrain without a loss term (dist, style, gan)."),
    progress: bool = typer.Option(True, "--progress/--no-progress"),
):
    """Score a generator (and optional loss ablations) on the four metrics."""
    with _exit_on_error():
        bundle, _, meta = load_checkpoint(checkpoint, expect="generator")
        cfg = TrainConfig(**meta["train_config"])
        H, _, _ = load_checkpoint(_require(Path(meta["lm"]), "pretrain-lm"), expect="lm")
        train, val, test = _splits(corpus, cfg.seed)
        if len(test) == 0 or len(train) == 0:
            raise ConfigurationError("corpus split is empty; generate a larger corpus")
        manifest = _manifest("evaluate", cfg, corpus)

        classifiers = train_style_classifiers(train, H, _lm_config(bundle), cfg.window, cfg.seed)
        X, y = sample_labelled_features(test, H, _lm_config(bundle), cfg.window, cfg.seed + 1)
        accuracy = classifier_accuracy(classifiers, X, y)
        logger.info("style classifier held-out accuracy: %s", {train.style_names[k]: round(v, 3) for k, v in accuracy.items()})

        div = diversity_bounds(train, H, _lm_config(bundle), window=cfg.window, seed=cfg.seed)
        nov = novelty_bounds(train, H, _lm_config(bundle), window=cfg.window, seed=cfg.seed)
        items = sample_eval_items(test, n_samples, cfg.window, cfg.n_ctx, cfg.seed)

        reports = {"full" if drop_loss else cfg.model.variant:
                   _evaluate_one(bundle, H, items, classifiers, div, nov, cfg, train.style_names, progress)}
        if drop_loss:
            C, _, _ = load_checkpoint(_require(Path(meta["comparator"]), "pretrain-comparator"), expect="comparator")
            for label, ablated in ablation_configs(cfg, drop_loss).items():
                if label == "full":
                    continue
                console.print(f"[info]retraining {label}[/info]")
                run = train_generator(train, H, C, ablated, progress=progress)
                reports[label] = _evaluate_one(run.bundle, H, items, classifiers, div, nov, ablated,
                                               train.style_names, progress)

        samples = {label: group_by_style(rep.pop("samples"), train.style_names) for label, rep in reports.items()}
        json_bytes, csv_bytes = make_downloads(reports)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(json_bytes)
        csv_path = out.with_suffix(".csv")
        csv_path.write_bytes(csv_bytes)
        samples_path = out.with_name(out.stem + "_samples.json")
        dump_json(samples, samples_path)
        manifest.finish(out.with_suffix(".manifest.json"), [out, csv_path, samples_path])
        console.print(metrics_table(reports))
        console.print(f"[ok]report[/ok] written to {out}")


@app.command("select-hparams")
def select_hparams_cmd(
    config: Path = typer.Option(DESK_CONFIG_PATH, "--config"),
    grid: Path = typer.Option(HPARAM_GRID_PATH, "--grid"),
    corpus: Path = typer.Option(..., "--corpus"),
    out: Path = typer.Option(RUNS_DIR, "--out"),
    variant: str = typer.Option("D", "--variant"),
    lm: Optional[Path] = typer.Option(None, "--lm"),
    comparator: Optional[Path] = typer.Option(None, "--comparator"),
    progress: bool = typer.Option(False, "--progress/--no-progress"),
):
    """Pick loss weights and optimizer settings by hold-out FED."""
    with _exit_on_error():
        base = load_train_config(config, "train-generator", variant=variant)
        H, lm_config, C, _, _ = _upstream(out, lm, comparator)
        base = base.model_copy(update={"model": lm_config.model_copy(update={"variant": variant})})
        candidates = expand_grid(base, load_hparam_grid(grid))
        train, val, _ = _splits(corpus, base.seed)
        manifest = _manifest("select-hparams", base, corpus)
        selection = select_hyperparams(candidates, train, val, H, C, progress=progress)
        path = out / "selection.json"
        dump_json({"best_index": selection.best_index, "scores": selection.scores,
                   "best": selection.best.model_dump(),
                   "candidates": [{"loss": c.loss.model_dump(), "optimizer": c.optimizer.model_dump()}
                                  for c in candidates]}, path)
        manifest.finish(out / "selection.manifest.json", [path])
        console.print(f"[ok]best candidate {selection.best_index}[/ok]: loss {selection.best.loss.model_dump()}, "
                      f"lr {selection.best.optimizer.lr}")


def main() -> None:
    app()


if __name__ == "__main__":
    main()
