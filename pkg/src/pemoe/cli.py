"""Command-line pipeline: gen, sanitize, train, eval, ablate, gradcheck.

Every command is deterministic for a fixed (config, seed): artifacts written
twice are byte-identical. `--stage all` round-trips through the same files
the individual stages use, so running `1`, `mine`, `2` separately produces a
final checkpoint byte-identical to one `all` run.

Exit codes: 0 success, 1 validation error (bad flags, config, or file
content), 2 runtime or numeric error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .config import PipelineConfig, load_pipeline_config
from .corpus import Corpus, Platform, SyntheticSpec, generate_synthetic, load_corpus, save_corpus, split_unseen_items
from .evaluate import (
    COMPOSITE_CAVEAT,
    EvalReport,
    evaluate_model,
    render_table,
    report_lines,
    run_ablation,
)
from .model import init_model, load_model, save_model
from .textprep import load_keywords, sanitize_corpus
from .train import (
    LOSS_INFONCE,
    LOSS_TRIPLET,
    TrainError,
    finite_diff_report,
    load_triplets,
    make_gradcheck_instance,
    mine_hard_negatives,
    save_triplets,
    train_stage1,
    train_stage2,
)

CORPUS_FILE = "corpus.txt"
STAGE1_CKPT = "stage1.ckpt"
STAGE1_LOG = "stage1.log"
TRIPLET_FILE = "triplets.txt"
FINAL_CKPT = "model.ckpt"
STAGE2_LOG = "stage2.log"

_CONFIG_OPT = click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(dir_okay=False, path_type=Path),
    envvar="PEMOE_CONFIG",
    default=None,
    help="Pipeline config file (key = value); defaults apply when omitted. "
    "Also read from $PEMOE_CONFIG.",
)


@click.group()
def cli():
    """Platform-expert mixture retrieval pipeline."""


@cli.command("gen")
@_CONFIG_OPT
@click.option("--locations", type=click.IntRange(min=1), default=None, help="Locations per platform.")
@click.option("--queries-per-location", type=click.IntRange(min=1), default=None)
@click.option("--noise-sigma", type=click.FloatRange(min=0.0), default=None)
@click.option("--platform-rotation", type=click.FloatRange(min=0.0), default=None,
              help="How far the platforms' image maps twist away from each other.")
@click.option("--d-t", type=click.IntRange(min=1), default=None, help="Text embedding dim.")
@click.option("--d-v", type=click.IntRange(min=1), default=None, help="Image embedding dim.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Output manifest path.")
def cmd_gen(config_path, locations, queries_per_location, noise_sigma, platform_rotation, d_t, d_v, seed, out):
    """Generate a deterministic synthetic corpus manifest."""
    config = load_pipeline_config(config_path)
    spec = SyntheticSpec(
        locations_per_platform=locations if locations is not None else config.locations_per_platform,
        d_t=d_t if d_t is not None else config.d_t,
        d_v=d_v if d_v is not None else config.d_v,
        noise_sigma=noise_sigma if noise_sigma is not None else config.noise_sigma,
        queries_per_location=(
            queries_per_location if queries_per_location is not None else config.queries_per_location
        ),
        platform_rotation=(
            platform_rotation if platform_rotation is not None else config.platform_rotation
        ),
        seed=seed if seed is not None else config.seed,
    )
    spec.validate()
    corpus = generate_synthetic(spec)
    path = out if out is not None else Path(config.output_dir) / CORPUS_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, path)
    click.echo(
        f"wrote {path}: gallery={len(corpus.gallery)} queries={len(corpus.queries)} "
        f"d_t={corpus.d_t} d_v={corpus.d_v} seed={spec.seed}"
    )


@cli.command("sanitize")
@_CONFIG_OPT
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--keywords", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--platforms", default=None, help="Comma-separated platform tags (default from config).")
@click.option("--refiner", default=None, help="identity, template-stub, or command:<cmdline>.")
def cmd_sanitize(config_path, in_path, out_path, keywords, platforms, refiner):
    """Remove directional sentences from captions of the selected platforms."""
    config = load_pipeline_config(config_path)
    if platforms is None:
        selected = config.sanitize_platforms
    else:
        selected = tuple(Platform.parse(t.strip()) for t in platforms.split(",") if t.strip())
        if not selected:
            raise click.BadParameter("no platforms given", param_hint="--platforms")
    keyword_path = keywords if keywords is not None else config.keyword_file
    keyword_list = load_keywords(keyword_path) if keyword_path else None
    corpus = load_corpus(in_path)
    cleaned, stats = sanitize_corpus(corpus, selected, keyword_list, refiner if refiner is not None else config.refiner)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(cleaned, out_path)
    total = 0
    for p in selected:
        s = stats[p]
        total += s.sentences_removed
        click.echo(
            f"{p.value}: captions={s.captions} changed={s.captions_changed} "
            f"sentences_removed={s.sentences_removed}"
        )
    click.echo(f"total sentences removed: {total}")
    click.echo(f"wrote {out_path}")


def _resolve_corpus(config: PipelineConfig, out_dir: Path) -> Corpus:
    """Load the configured corpus, generating (and persisting) the synthetic one on first use."""
    if config.corpus_path is not None:
        return load_corpus(config.corpus_path)
    path = out_dir / CORPUS_FILE
    if not path.exists():
        out_dir.mkdir(parents=True, exist_ok=True)
        save_corpus(generate_synthetic(config.synthetic_spec()), path)
    return load_corpus(path)


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise click.ClickException(f"{path} not found; run {hint} first")
    return path


def _run_stage1(config: PipelineConfig, out_dir: Path) -> None:
    corpus = _resolve_corpus(config, out_dir)
    train_corpus, _ = split_unseen_items(corpus, config.val_fraction, config.seed)
    tc = config.train_config()
    model = init_model(corpus.d_t, corpus.d_v, config.d_e, config.h_g, config.h_e, config.seed,
                       temperature=tc.temperature)
    log = train_stage1(model, train_corpus, tc)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, out_dir / STAGE1_CKPT)
    log.save(out_dir / STAGE1_LOG)
    gate_losses = log.phase_losses("B")
    if gate_losses:
        click.echo(f"stage 1 done: gate loss {gate_losses[0]:.4f} -> {gate_losses[-1]:.4f}")
    click.echo(f"wrote {out_dir / STAGE1_CKPT}")


def _run_mine(config: PipelineConfig, out_dir: Path, workers: int) -> None:
    corpus = _resolve_corpus(config, out_dir)
    train_corpus, _ = split_unseen_items(corpus, config.val_fraction, config.seed)
    model = load_model(_require(out_dir / STAGE1_CKPT, "`pemoe train --stage 1`"))
    _check_dims(model, corpus)
    triplets = mine_hard_negatives(
        model,
        train_corpus,
        config.negatives_per_query,
        workers=workers,
        within_platform=config.mine_within_platform,
    )
    save_triplets(triplets, out_dir / TRIPLET_FILE)
    click.echo(f"mined {len(triplets)} triplets -> {out_dir / TRIPLET_FILE}")


def _run_stage2(config: PipelineConfig, out_dir: Path, from_scratch: bool, workers: int) -> None:
    corpus = _resolve_corpus(config, out_dir)
    train_corpus, val_corpus = split_unseen_items(corpus, config.val_fraction, config.seed)
    tc = config.train_config()
    if from_scratch:
        model = init_model(corpus.d_t, corpus.d_v, config.d_e, config.h_g, config.h_e, config.seed,
                           temperature=tc.temperature)
    else:
        model = load_model(_require(out_dir / STAGE1_CKPT, "`pemoe train --stage 1`"))
    _check_dims(model, corpus)
    triplets = load_triplets(_require(out_dir / TRIPLET_FILE, "`pemoe train --stage mine`"))
    log = train_stage2(
        model, triplets, train_corpus, tc,
        workers=workers, within_platform=config.mine_within_platform, val_corpus=val_corpus,
    )
    save_model(model, out_dir / FINAL_CKPT)
    log.save(out_dir / STAGE2_LOG)
    losses = log.phase_losses("stage2")
    vals = log.phase_losses("val")
    if losses:
        click.echo(f"stage 2 done: triplet loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    if vals:
        click.echo(f"validation R@1 {vals[0]:.4f} -> {max(vals):.4f} (best epoch kept)")
    click.echo(f"wrote {out_dir / FINAL_CKPT}")


@cli.command("train")
@_CONFIG_OPT
@click.option("--stage", type=click.Choice(["1", "mine", "2", "all"]), default="all")
@click.option("--from-scratch", is_flag=True, help="Stage 2 starts from a fresh initialization instead of the stage-1 checkpoint.")
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Parallel workers for scoring/mining.")
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), default=None)
def cmd_train(config_path, stage, from_scratch, workers, out_dir):
    """Run the two-stage training pipeline (or one stage of it)."""
    config = load_pipeline_config(config_path)
    out = out_dir if out_dir is not None else Path(config.output_dir)
    n_workers = workers if workers is not None else config.workers
    if stage in ("1", "all"):
        _run_stage1(config, out)
    if stage in ("mine", "all"):
        _run_mine(config, out, n_workers)
    if stage in ("2", "all"):
        _run_stage2(config, out, from_scratch, n_workers)


def _check_dims(model, corpus) -> None:
    if model.d_t != corpus.d_t or model.d_v != corpus.d_v:
        raise ValueError(
            f"checkpoint/corpus dimension mismatch: checkpoint has d_t={model.d_t} d_v={model.d_v}, "
            f"corpus has d_t={corpus.d_t} d_v={corpus.d_v}"
        )


def _parse_ks(value: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(tok) for tok in value.split(",") if tok.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}", param_hint="--ks") from None
    if not ks or any(k < 1 for k in ks):
        raise click.BadParameter(f"ranks must be positive integers, got {value!r}", param_hint="--ks")
    return ks


def _report_json(report: EvalReport) -> dict:
    return {
        "label": report.config_label,
        "recall": {str(k): v for k, v in sorted(report.r_at.items())},
        "composite": report.composite_score,
        "num_queries": report.num_queries,
        "composite_note": COMPOSITE_CAVEAT,
    }


@cli.command("eval")
@_CONFIG_OPT
@click.option("--checkpoint", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Checkpoint to score (default: <output_dir>/model.ckpt).")
@click.option("--ks", default="1,5,10", help="Comma-separated recall cutoffs.")
@click.option("--split", type=click.Choice(["val", "train", "all"]), default="val")
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Write metric lines to this file.")
@click.option("--json", "json_path", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--workers", type=click.IntRange(min=1), default=None)
def cmd_eval(config_path, checkpoint, ks, split, out_path, json_path, workers):
    """Rank the gallery for each query and report Recall@K."""
    config = load_pipeline_config(config_path)
    out_dir = Path(config.output_dir)
    ckpt = checkpoint if checkpoint is not None else _require(out_dir / FINAL_CKPT, "`pemoe train`")
    model = load_model(ckpt)
    corpus = _resolve_corpus(config, out_dir)
    _check_dims(model, corpus)
    if split == "all":
        subset = corpus
    else:
        train_corpus, val_corpus = split_unseen_items(corpus, config.val_fraction, config.seed)
        subset = val_corpus if split == "val" else train_corpus
    report = evaluate_model(
        model,
        subset.queries,
        subset.gallery,
        ks=_parse_ks(ks),
        label=Path(ckpt).stem,
        workers=workers if workers is not None else config.workers,
    )
    click.echo(render_table([report]))
    lines = report_lines(report)
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        click.echo(f"wrote {out_path}")
    if json_path is not None:
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(_report_json(report), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        click.echo(f"wrote {json_path}")


@cli.command("ablate")
@_CONFIG_OPT
@click.option("--json", "json_path", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--workers", type=click.IntRange(min=1), default=None)
def cmd_ablate(config_path, json_path, workers):
    """Train and score the four fusion configurations."""
    config = load_pipeline_config(config_path)
    if workers is not None:
        config.workers = workers
    corpus = _resolve_corpus(config, Path(config.output_dir))
    reports = run_ablation(corpus, config)
    click.echo(render_table(reports))
    if json_path is not None:
        json_path.parent.mkdir(parents=True, exist_ok=True)
        payload = [_report_json(r) for r in reports]
        json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        click.echo(f"wrote {json_path}")


@cli.command("gradcheck")
@click.option("--loss", type=click.Choice([LOSS_INFONCE, LOSS_TRIPLET, "both"]), default="both")
@click.option("--eps", type=click.FloatRange(min=0.0, min_open=True), default=1e-5,
              help="Central-difference step.")
@click.option("--threshold", type=click.FloatRange(min=0.0, min_open=True), default=1e-4)
@click.option("--seed", type=int, default=0)
@click.option("--sample", type=click.IntRange(min=200), default=None,
              help="Check a seeded random subsample of at least this many parameters.")
def cmd_gradcheck(loss, eps, threshold, seed, sample):
    """Compare analytic gradients against central finite differences."""
    kinds = [LOSS_INFONCE, LOSS_TRIPLET] if loss == "both" else [loss]
    failures = []
    for kind in kinds:
        model, batch = make_gradcheck_instance(seed, kind, eps)
        report = finite_diff_report(model, batch, kind, eps, sample=sample, seed=seed)
        click.echo(
            f"loss={kind} checked={report.checked} max_rel_err={report.max_rel_error:.3e} "
            f"worst={report.worst_param}[{report.worst_flat_index}]"
        )
        if report.max_rel_error >= threshold:
            offenders = sorted(report.per_param.items(), key=lambda kv: -kv[1])[:3]
            detail = ", ".join(f"{name}: {err:.3e}" for name, err in offenders)
            failures.append(f"{kind} max_rel_err={report.max_rel_error:.3e} >= {threshold} (worst layers: {detail})")
    if failures:
        raise TrainError("gradient check failed: " + "; ".join(failures))
    click.echo(f"gradient check passed (threshold {threshold})")


def main(argv=None) -> int:
    """Entry point with the documented exit-code mapping."""
    try:
        cli.main(args=argv, prog_name="pemoe", standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 130
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 1
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except (RuntimeError, ArithmeticError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
