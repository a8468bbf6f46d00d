"""``slsr`` command line: one subcommand per stage plus ``pipeline`` and ``report``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import trainer
from .cluster import ClusterModel
from .config import ConfigError, PipelineConfig, from_dict, load_config
from .data import DatasetBundle, DatasetError, PreprocessConfig, load_market_dir, make_synthetic_corpus, \
    write_market_tree
from .optim import NumericError

logger = logging.getLogger("slsr")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3


class MissingArtifact(RuntimeError):
    def __init__(self, path, producer: str):
        super().__init__(f"missing {path}; run `slsr {producer}` first")
        self.producer = producer


class Context:
    """Resolved config plus output workspace shared by the stage commands."""

    def __init__(self, cfg: PipelineConfig, force: bool = False):
        self.cfg = cfg
        self.force = force
        out = cfg.output_dir or os.environ.get("SLSR_OUTPUT_DIR") or "slsr_out"
        self.ws = trainer.Workspace(out, cfg.hash())
        self.root = self.ws.root
        self._bundle: Optional[DatasetBundle] = None
        self._pre: Optional[PreprocessConfig] = None

    def require(self, rel: str, producer: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise MissingArtifact(p, producer)
        return p

    def up_to_date(self, stage: str) -> bool:
        if not self.force and self.ws.is_current(stage, self.cfg.stage_hash(stage)):
            print(f"{stage}: up to date (config unchanged; use --force to rerun)")
            return True
        return False

    def done(self, stage: str) -> None:
        self.ws.manifest["config_hash"] = self.cfg.hash()
        self.ws.mark(stage, self.cfg.stage_hash(stage))

    @property
    def bundle(self) -> DatasetBundle:
        if self._bundle is None:
            d = self.cfg.data
            if d.root is not None:
                self._bundle = load_market_dir(d.root, keep_distractors=d.keep_distractors)
            else:
                self._bundle = DatasetBundle.load_manifest(self.require("data/bundle.json", "synth"))
        return self._bundle

    @property
    def preprocess(self) -> PreprocessConfig:
        if self._pre is None:
            self._pre = trainer.resolve_preprocess(self.bundle, self.cfg.preprocess)
        return self._pre

    @property
    def seed(self) -> int:
        return self.cfg.seed

    def clusters(self) -> ClusterModel:
        path = self.require("assignments.csv", "cluster")
        t = self.cfg.train_config()
        return trainer.clusters_from_assignments(path, self.bundle, t.K, t.support_mode)


# ---------------------------------------------------------------------------
# stage commands


def cmd_synth(ctx: Context) -> int:
    if ctx.cfg.data.root is not None:
        print(f"synth: data.root is set ({ctx.cfg.data.root}); nothing to generate")
        return EXIT_OK
    if ctx.up_to_date("synth"):
        return EXIT_OK
    d = ctx.cfg.data
    bundle = make_synthetic_corpus(d.n_identities, d.n_latent_clusters, d.images_per_identity, d.image_size,
                                   seed=trainer.substream(ctx.seed, "data"), n_cameras=d.n_cameras)
    write_market_tree(bundle, ctx.root / "data")
    ctx.ws.add("data/bundle.json", "synth", "dataset", ctx.seed)
    ctx.done("synth")
    print(f"synth: {len(bundle.train)} train / {len(bundle.split('query'))} query / "
          f"{len(bundle.split('gallery'))} gallery images in {ctx.root / 'data'}")
    return EXIT_OK


def cmd_train_features(ctx: Context) -> int:
    if ctx.up_to_date("train-features"):
        return EXIT_OK
    cfg = ctx.cfg
    model = trainer.stage_features(ctx.ws, ctx.bundle, cfg.train_config(),
                                   cfg.backbone_config(ctx.bundle.n_identities), ctx.preprocess, ctx.seed)
    ctx.done("train-features")
    print(f"train-features: {cfg.train.stage1_epochs} epochs, final loss {model.history[-1]['loss']:.4f}"
          if model.history else "train-features: untrained model saved")
    return EXIT_OK


def cmd_cluster(ctx: Context) -> int:
    if ctx.up_to_date("cluster"):
        return EXIT_OK
    model = trainer.load_model(ctx.require("stage1.ckpt", "train-features"))
    cl = trainer.stage_cluster(ctx.ws, model, ctx.bundle, ctx.cfg.train_config(), ctx.preprocess, ctx.seed)
    ctx.done("cluster")
    print(f"cluster: K={cl.K}, sizes {np.bincount(cl.assignments, minlength=cl.K).tolist()}, p_c {cl.p_c}")
    _print_silhouette(json.loads((ctx.root / "silhouette.json").read_text()))
    return EXIT_OK


def cmd_gan(ctx: Context) -> int:
    t = ctx.cfg.train_config()
    if t.generator != "dcgan":
        print(f"gan: generator is {t.generator!r}; no adversarial training needed")
        return EXIT_OK
    if ctx.up_to_date("gan"):
        return EXIT_OK
    clusters = ctx.clusters()
    pairs = trainer.stage_gan(ctx.ws, ctx.bundle, clusters, ctx.cfg.gan_config(), ctx.seed)
    ctx.done("gan")
    for p in pairs:
        last = p.history[-1] if p.history else {}
        print(f"gan: cluster {p.cluster_id} {p.steps_trained} steps, "
              f"d_loss {last.get('d_loss', float('nan')):.3f} g_loss {last.get('g_loss', float('nan')):.3f}")
    return EXIT_OK


def _load_pairs(ctx: Context, K: int):
    pairs = []
    for c in range(K):
        path = ctx.root / f"gan/gan_c{c}.ckpt"
        if path.exists():
            pairs.append(trainer.load_gan(path))
        else:
            pairs.append(None)
    if all(p is None for p in pairs):
        raise MissingArtifact(ctx.root / "gan", "gan")
    return pairs


def cmd_generate(ctx: Context) -> int:
    if ctx.up_to_date("generate"):
        return EXIT_OK
    t = ctx.cfg.train_config()
    clusters = ctx.clusters()
    pairs = _load_pairs(ctx, clusters.K) if t.generator == "dcgan" else None
    gen = trainer.stage_generate(ctx.ws, ctx.bundle, clusters, t, ctx.seed, pairs,
                                 gan_size=ctx.cfg.gan.image_size)
    ctx.done("generate")
    print(f"generate: {len(gen)} images in {ctx.root / 'generated'}")
    return EXIT_OK


def cmd_train(ctx: Context) -> int:
    if ctx.up_to_date("train"):
        return EXIT_OK
    t = ctx.cfg.train_config()
    bundle = ctx.bundle
    generated, clusters = [], None
    if t.scheme != "none":
        clusters = ctx.clusters()
        generated = trainer.load_generated(ctx.require("generated/manifest.json", "generate").parent)
    model = trainer.stage_train(ctx.ws, bundle, generated, clusters, t,
                                ctx.cfg.backbone_config(bundle.n_identities), ctx.preprocess, ctx.seed)
    ctx.done("train")
    print(f"train: scheme {t.scheme}, {len(generated)} generated, {model.training_step} steps, "
          f"final epoch loss {model.history[-1]['loss']:.4f}" if model.history else "train: no epochs run")
    return EXIT_OK


def cmd_eval(ctx: Context) -> int:
    if ctx.up_to_date("eval"):
        return EXIT_OK
    model = trainer.load_model(ctx.require("final.ckpt", "train"))
    t = ctx.cfg.train_config()
    extra = {"scheme": t.scheme, "seed": ctx.seed, "config_hash": ctx.cfg.hash(), "K": t.K}
    gm = ctx.root / "generated/manifest.json"
    extra["generated"] = len(json.loads(gm.read_text())) if gm.exists() and t.scheme != "none" else 0
    if ctx.cfg.eval.rerank and len({r.identity for r in ctx.bundle.split("gallery")}) == \
            len(ctx.bundle.split("gallery")):
        print("eval: warning: re-ranking on a gallery with one image per identity rarely helps")
    rep = trainer.stage_eval(ctx.ws, model, ctx.bundle, ctx.preprocess, ctx.cfg.eval, extra, ctx.seed)
    ctx.done("eval")
    _print_report(rep)
    return EXIT_OK


STAGES = {
    "synth": cmd_synth,
    "train-features": cmd_train_features,
    "cluster": cmd_cluster,
    "gan": cmd_gan,
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
}


def cmd_pipeline(ctx: Context) -> int:
    scheme = ctx.cfg.train.scheme
    for name, fn in STAGES.items():
        if scheme == "none" and name in ("train-features", "cluster", "gan", "generate"):
            continue
        if name == "synth" and ctx._bundle is not None:
            continue
        try:
            fn(ctx)
        except (MissingArtifact, ConfigError, NumericError):
            raise
        except Exception as e:
            raise trainer.StageError(name, e) from e
    return EXIT_OK


# ---------------------------------------------------------------------------
# reporting


def _print_silhouette(rows: list[dict]) -> None:
    if not rows:
        return
    print("K           " + "".join(f"{r['K']:>9d}" for r in rows))
    print("silhouette  " + "".join(f"{100 * r['score']:>8.2f}%" for r in rows))


def _print_report(rep: dict) -> None:
    ranks = rep.get("ranks", [1, 5, 10, 20])
    cells = "  ".join(f"rank-{k} {100 * v:.2f}" for k, v in zip(ranks, rep["cmc"]))
    print(f"eval: {cells}  mAP {100 * rep['mAP']:.2f}  ({rep['n_queries']} queries, "
          f"{rep['n_excluded']} excluded)")


def grid_cell_config(cfg: PipelineConfig, K: int, total: int, root: Path) -> PipelineConfig:
    train = dataclasses.replace(cfg.train, K=K, generated_total=total, scheme=cfg.train.scheme if total else "none")
    return dataclasses.replace(cfg, train=train, output_dir=str(root / "grid" / f"K{K}_G{total}"))


def run_grid(ctx: Context) -> list[dict]:
    """Run the pipeline for every (K, generated count) cell; reuses the shared dataset."""
    cfg = ctx.cfg
    cmd_synth(ctx)
    rows = []
    for total in cfg.report.generated_totals:
        ks = cfg.report.ks if total else (cfg.train.K,)
        for K in ks:
            cell = grid_cell_config(cfg, K, total, ctx.root)
            cell_ctx = Context(cell, force=ctx.force)
            cell_ctx._bundle = ctx.bundle
            cmd_pipeline(cell_ctx)
            rep = json.loads((cell_ctx.root / "report.json").read_text())
            rows.append({"K": K if total else None, "generated": total, "rank1": rep["cmc"][0],
                         "mAP": rep["mAP"]})
    return rows


def _collect_grid(root: Path) -> list[dict]:
    rows = []
    for rep_path in sorted(root.glob("grid/*/report.json")):
        rep = json.loads(rep_path.read_text())
        rows.append({"K": rep.get("K") if rep.get("generated") else None, "generated": rep.get("generated", 0),
                     "rank1": rep["cmc"][0], "mAP": rep["mAP"]})
    return rows


def format_grid(rows: list[dict]) -> str:
    """Rows of generated counts, columns of K, cells ``rank-1 / mAP`` in percent."""
    ks = sorted({r["K"] for r in rows if r["K"] is not None})
    totals = sorted({r["generated"] for r in rows})
    cell = {(r["K"], r["generated"]): r for r in rows}
    lines = ["generated  " + "".join(f"{'K=' + str(k):>16s}" for k in ks)]
    for g in totals:
        if g == 0:
            base = next((r for r in rows if r["generated"] == 0), None)
            lines.append(f"{g:>9d}  {'baseline':>16s}" + (
                f"  {100 * base['rank1']:.2f} / {100 * base['mAP']:.2f}" if base else ""))
            continue
        vals = []
        for k in ks:
            r = cell.get((k, g))
            vals.append(f"{100 * r['rank1']:6.2f} / {100 * r['mAP']:5.2f}" if r else f"{'-':>15s}")
        lines.append(f"{g:>9d}  " + "".join(f"{v:>16s}" for v in vals))
    return "\n".join(lines)


def cmd_report(ctx: Context, run: bool = False) -> int:
    sil = ctx.require("silhouette.json", "cluster")
    print("average silhouette by cluster count")
    _print_silhouette(json.loads(sil.read_text()))
    rep = ctx.root / "report.json"
    if rep.exists():
        _print_report(json.loads(rep.read_text()))
    rows = run_grid(ctx) if run else _collect_grid(ctx.root)
    if rows:
        (ctx.root / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
        ctx.ws.add("ablation.json", "report", "report", ctx.seed)
        print("rank-1 / mAP (%) by cluster count and generated images")
        print(format_grid(rows))
    elif not run:
        print("no ablation results yet; `slsr report --grid` runs the grid")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (desk preset when omitted)")
    common.add_argument("--preset", choices=["desk", "market"], help="start from a named preset")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--force", action="store_true", help="rerun even if the config hash is unchanged")
    common.add_argument("--k", type=int, help="number of clusters")
    common.add_argument("--generated-total", type=int)
    common.add_argument("--output-dir", help="defaults to $SLSR_OUTPUT_DIR, then ./slsr_out")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="slsr", description="sparse label smoothing for person re-id")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "write the synthetic planted-cluster corpus",
        "train-features": "train the stage-1 identity classifier",
        "cluster": "extract features and run k-means",
        "gan": "train one DCGAN per cluster",
        "generate": "sample images per cluster",
        "train": "joint training on real and generated images",
        "eval": "CMC / mAP on query and gallery",
        "report": "silhouette table and ablation grid",
        "pipeline": "run every stage in order",
    }
    for name, h in helps.items():
        sp = sub.add_parser(name, parents=[common], help=h)
        if name == "report":
            sp.add_argument("--grid", action="store_true", help="run the K x generated-count grid first")
    return p


def resolve_config(args) -> PipelineConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.preset == "market":
        cfg = PipelineConfig.market()
    else:
        cfg = PipelineConfig.desk()
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.output_dir is not None:
        over["output_dir"] = args.output_dir
    train = {}
    if args.k is not None:
        train["K"] = args.k
    if args.generated_total is not None:
        train["generated_total"] = args.generated_total
    if args.workers is not None:
        train["workers"] = args.workers
    if train:
        over["train"] = train
    return from_dict(over, base=cfg) if over else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = Context(resolve_config(args), force=args.force)
        if args.command == "pipeline":
            return cmd_pipeline(ctx)
        if args.command == "report":
            return cmd_report(ctx, run=args.grid)
        return STAGES[args.command](ctx)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except trainer.StageError as e:
        print(f"error: {e}", file=sys.stderr)
        if isinstance(e.cause, NumericError):
            return EXIT_NUMERIC
        if isinstance(e.cause, MissingArtifact):
            return EXIT_MISSING
        raise
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DatasetError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
