"""End-to-end training: stage-1 features, clustering, per-cluster generation,
label assignment and joint training on real + generated images."""
from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import io
from .backbone import (BackboneConfig, EmbeddingMatrix, ModelState, extract_features, init_model,
                       train_feature_model)
from .cluster import ClusterModel, cluster_support, kmeans_fit, silhouette_report
from .data import (DatasetBundle, ImagePipeline, ImageRecord, PreprocessConfig, bytes_to_unit, channel_mean,
                   resize, unit_to_bytes)
from .evaluation import (average_multi_query, cmc_map, pairwise_l2, plot_cmc, rerank_k_reciprocal)
from .gan import GanConfig, GanPair, init_pair, pseudo_generator_sample, sample, train_gan
from .labels import LabelTarget, all_in_one, lsro, one_hot, slsr_target
from .loss import gated_loss, split_losses
from .optim import apply_sgd_update, inverse_lr, seeded

logger = logging.getLogger(__name__)

GEN_SCHEMES = ("slsr", "lsro", "pseudo", "all_in_one", "none")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    inv_gamma: float = 0.1
    inv_power: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 130
    seed: int = 0
    K: int = 3
    generated_total: Optional[int] = None
    scheme: str = "slsr"
    generator: str = "dcgan"
    pseudo_noise: float = 0.1
    allocation: str = "proportional"
    support_mode: str = "all"
    generated_loss_scale: float = 1.0
    stage1_epochs: int = 40
    stage1_lr: float = 0.001
    stage1_momentum: float = 0.9
    validation_holdout: bool = False
    cluster_layer: str = "pool"
    silhouette_ks: tuple[int, ...] = (2, 3, 4, 5)
    kmeans_max_iter: int = 300
    workers: int = 1

    def __post_init__(self):
        self.silhouette_ks = tuple(int(k) for k in self.silhouette_ks)
        for name in ("base_lr", "momentum", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.inv_gamma < 0 or self.inv_power < 0 or self.weight_decay < 0:
            raise ValueError("schedule and decay coefficients must be nonnegative")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.scheme not in GEN_SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.generator not in ("dcgan", "pseudo"):
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.allocation not in ("proportional", "uniform"):
            raise ValueError(f"unknown allocation {self.allocation!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["silhouette_ks"] = list(self.silhouette_ks)
        return d


@dataclass
class EvalConfig:
    feature_layer: str = "bottleneck"
    rerank: bool = False
    k1: int = 20
    k2: int = 6
    lambda_value: float = 0.3
    multi_query: bool = False
    plot: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def substream(root: int, *names) -> int:
    """Derive an independent seed from the root seed and a stage/cluster path."""
    words = [int(root) & 0xFFFFFFFF] + [zlib.crc32(str(n).encode()) for n in names]
    return int(np.random.SeedSequence(words).generate_state(1)[0] & 0x7FFFFFFF)


def config_hash(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# optimization


def lr_schedule(cfg: TrainConfig, i: int) -> float:
    return inverse_lr(cfg.base_lr, cfg.inv_gamma, cfg.inv_power, i)


def sgd_step(model: ModelState, batch: torch.Tensor, targets: torch.Tensor, lam: torch.Tensor, lr: float,
             momentum: float, weight_decay: float, generated_loss_scale: float = 1.0,
             refine_targets: Optional[Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = None):
    """One SGD step on the gated loss; returns ``(loss, log_probs)``.

    ``refine_targets(log_probs, targets)`` may replace targets from the
    current prediction (pseudo-labels).
    """
    model.net.train()
    lp = model.net.log_probs(batch, generated=lam.bool())
    if refine_targets is not None:
        targets = refine_targets(lp.detach(), targets)
    loss = gated_loss(lp, targets, lam, generated_loss_scale)
    model.net.zero_grad(set_to_none=True)
    loss.backward()
    apply_sgd_update(model.net.named_parameters(), model.momentum, lr, momentum, weight_decay)
    model.training_step += 1
    return loss.item(), lp.detach()


def _pseudo_refiner(lam: torch.Tensor):
    def refine(lp: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        gen = lam.bool()
        if not gen.any():
            return targets
        out = targets.clone()
        out[gen] = F.one_hot(lp[gen].argmax(1), lp.shape[1]).to(targets.dtype)
        return out
    return refine


# ---------------------------------------------------------------------------
# targets for generated samples


def allocate_counts(cluster_sizes: Sequence[int], total: int, mode: str = "proportional") -> list[int]:
    """Split ``total`` across clusters (largest remainder for proportional)."""
    k = len(cluster_sizes)
    if mode == "uniform":
        weights = np.ones(k)
    else:
        weights = np.asarray(cluster_sizes, dtype=np.float64)
    raw = total * weights / weights.sum()
    counts = np.floor(raw).astype(int)
    rest = total - counts.sum()
    for i in np.argsort(-(raw - counts), kind="stable")[:rest]:
        counts[i] += 1
    return [int(c) for c in counts]


def generated_targets(scheme: str, generated: Sequence[ImageRecord], clusters: Optional[ClusterModel],
                      n_classes: int) -> list[LabelTarget]:
    """Static targets for generated images. ``pseudo`` gets a placeholder that
    training replaces with the model's current argmax."""
    out = []
    for r in generated:
        if scheme == "slsr":
            c = r.cluster
            out.append(slsr_target(clusters.support[c], n_classes, cluster_id=c))
        elif scheme == "lsro":
            out.append(lsro(n_classes))
        elif scheme == "pseudo":
            t = lsro(n_classes)
            t.scheme = "pseudo"
            out.append(t)
        elif scheme == "all_in_one":
            out.append(all_in_one(n_classes))
        else:
            raise ValueError(f"scheme {scheme!r} has no generated targets")
    return out


# ---------------------------------------------------------------------------
# joint training


def joint_train(bundle: DatasetBundle, real: Sequence[ImageRecord], generated: Sequence[ImageRecord],
                gen_targets: Sequence[LabelTarget], cfg: TrainConfig, backbone_cfg: BackboneConfig,
                preprocess: PreprocessConfig, seed: int, log: Optional[io.CsvLog] = None) -> ModelState:
    """Train on a single shuffled pool of real and generated images."""
    out_dim = backbone_cfg.out_dim
    real = list(real)
    generated = list(generated)
    T = np.zeros((len(real) + len(generated), out_dim), dtype=np.float32)
    labels = bundle.labels(real)
    T[np.arange(len(real)), labels] = 1.0
    for i, t in enumerate(gen_targets):
        T[len(real) + i, :len(t.probs)] = t.probs
    lam = torch.cat([torch.zeros(len(real)), torch.ones(len(generated))])
    T = torch.from_numpy(T)

    model = init_model(backbone_cfg, seed)
    pipe = ImagePipeline(real + generated, preprocess, workers=cfg.workers)
    pseudo = cfg.scheme == "pseudo"
    with seeded(substream(seed, "dropout")):
        for epoch in range(cfg.epochs):
            sums = {"loss": 0.0, "n": 0, "gen": 0.0}
            for idx, x in pipe.epoch_batches(cfg.batch_size, seed, epoch):
                idx_t = torch.from_numpy(np.asarray(idx))
                lr = lr_schedule(cfg, model.training_step)
                lam_b = lam[idx_t]
                loss, lp = sgd_step(model, x, T[idx_t], lam_b, lr, cfg.momentum, cfg.weight_decay,
                                    cfg.generated_loss_scale, _pseudo_refiner(lam_b) if pseudo else None)
                rl, gl = split_losses(lp, T[idx_t], lam_b)
                sums["loss"] += loss * len(idx)
                sums["n"] += len(idx)
                sums["gen"] += float(lam_b.sum())
                if log is not None:
                    log.write(step=model.training_step, lr=lr, loss=loss, real_loss=rl, gen_loss=gl)
            n = max(sums["n"], 1)
            model.history.append({"epoch": epoch, "loss": sums["loss"] / n, "gen_fraction": sums["gen"] / n})
            logger.info("joint epoch %d loss %.4f", epoch, model.history[-1]["loss"])
    return model


def supervised_records(bundle: DatasetBundle, holdout: bool) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Split train records into (supervised, validation); validation is one image per identity."""
    train = bundle.train
    if not holdout:
        return train, []
    seen, sup, val = set(), [], []
    for r in train:
        if r.identity in seen:
            sup.append(r)
        else:
            seen.add(r.identity)
            val.append(r)
    return sup, val


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: ModelState, path, extra: Optional[dict] = None) -> None:
    meta = {"kind": "backbone", "config": model.config.to_json(), "training_step": model.training_step,
            "history": model.history}
    meta.update(extra or {})
    io.write_checkpoint(path, meta, io.state_to_segments(model.net))


def load_model(path) -> ModelState:
    meta, seg = io.read_checkpoint(path)
    if meta.get("kind") != "backbone":
        raise io.FormatError(f"{path} is not a backbone checkpoint")
    cfg = BackboneConfig(**meta["config"])
    state = init_model(cfg, 0)
    io.load_segments(state.net, seg)
    state.training_step = int(meta["training_step"])
    state.history = meta.get("history", [])
    return state


def save_gan(pair: GanPair, path) -> None:
    meta = {"kind": "gan", "config": pair.config.to_json(), "cluster_id": pair.cluster_id,
            "steps_trained": pair.steps_trained}
    seg = io.state_to_segments(pair.generator, "generator.")
    seg.update(io.state_to_segments(pair.discriminator, "discriminator."))
    io.write_checkpoint(path, meta, seg)


def load_gan(path) -> GanPair:
    meta, seg = io.read_checkpoint(path)
    if meta.get("kind") != "gan":
        raise io.FormatError(f"{path} is not a GAN checkpoint")
    pair = init_pair(GanConfig(**meta["config"]), meta["cluster_id"])
    io.load_segments(pair.generator, seg, "generator.")
    io.load_segments(pair.discriminator, seg, "discriminator.")
    pair.steps_trained = int(meta["steps_trained"])
    return pair


# ---------------------------------------------------------------------------
# staged pipeline


class Workspace:
    """Output directory plus a manifest of every artifact written."""

    def __init__(self, root, config_hash: str = ""):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        self.manifest_path = self.root / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"artifacts": [], "stages": {}}

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def add(self, rel: str, stage: str, kind: str, seed: int) -> None:
        arts = [a for a in self.manifest["artifacts"] if a["path"] != rel]
        arts.append({"path": rel, "stage": stage, "kind": kind, "seed": int(seed),
                     "config_hash": self.config_hash})
        self.manifest["artifacts"] = sorted(arts, key=lambda a: a["path"])
        self.save()

    def mark(self, stage: str, stage_hash: str) -> None:
        self.manifest["stages"][stage] = stage_hash
        self.save()

    def is_current(self, stage: str, stage_hash: str) -> bool:
        if self.manifest["stages"].get(stage) != stage_hash:
            return False
        arts = [a for a in self.manifest["artifacts"] if a["stage"] == stage]
        return bool(arts) and all((self.root / a["path"]).exists() for a in arts)

    def save(self) -> None:
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))


def resolve_preprocess(bundle: DatasetBundle, preprocess: PreprocessConfig) -> PreprocessConfig:
    if preprocess.mean_vector is not None:
        return preprocess
    cfg = PreprocessConfig(**{**asdict(preprocess)})
    cfg.mean_vector = channel_mean(bundle.train, preprocess)
    return cfg


def stage_features(ws: Workspace, bundle: DatasetBundle, cfg: TrainConfig, backbone_cfg: BackboneConfig,
                   pre: PreprocessConfig, seed: int) -> ModelState:
    sup, _ = supervised_records(bundle, cfg.validation_holdout)
    s = substream(seed, "stage1")
    model = train_feature_model(bundle, backbone_cfg, epochs=cfg.stage1_epochs, lr=cfg.stage1_lr,
                                momentum=cfg.stage1_momentum, seed=s, preprocess=pre,
                                batch_size=cfg.batch_size, weight_decay=cfg.weight_decay, records=sup,
                                workers=cfg.workers)
    save_model(model, ws.path("stage1.ckpt"), {"seed": s})
    ws.add("stage1.ckpt", "train-features", "checkpoint", s)
    log = io.CsvLog(ws.path("logs/stage1.csv"), ["epoch", "loss"])
    for h in model.history:
        log.write(**h)
    ws.add("logs/stage1.csv", "train-features", "log", s)
    return model


def stage_cluster(ws: Workspace, model: ModelState, bundle: DatasetBundle, cfg: TrainConfig,
                  pre: PreprocessConfig, seed: int, K: Optional[int] = None) -> ClusterModel:
    K = cfg.K if K is None else K
    s = substream(seed, "kmeans")
    train = bundle.train
    feats = extract_features(model, train, pre, layer=cfg.cluster_layer)
    io.write_embedding(ws.path("features.bin"), feats.values, feats.row_ids)
    ws.add("features.bin", "cluster", "features", s)
    clusters = kmeans_fit(feats, K, seed=s, max_iter=cfg.kmeans_max_iter)
    cluster_support(clusters, bundle, train, mode=cfg.support_mode)
    io.write_embedding(ws.path("centroids.bin"), clusters.centroids)
    ws.add("centroids.bin", "cluster", "features", s)
    io.write_assignments(ws.path("assignments.csv"), feats.row_ids, [r.identity for r in train],
                         clusters.assignments)
    ws.add("assignments.csv", "cluster", "assignments", s)
    ks = [k for k in cfg.silhouette_ks if 2 <= k <= len(train)]
    sil = silhouette_report(feats, ks, seed=s) if ks else []
    ws.path("silhouette.json").write_text(json.dumps(sil, indent=2))
    ws.add("silhouette.json", "cluster", "report", s)
    return clusters


def clusters_from_assignments(path, bundle: DatasetBundle, K: int, support_mode: str = "all") -> ClusterModel:
    rows = io.read_assignments(path)
    by_id = {r.image_id: r for r in bundle.train}
    if [r[0] for r in rows] != [r.image_id for r in bundle.train]:
        missing = [r[0] for r in rows if r[0] not in by_id]
        raise ValueError(f"assignments do not match the training split (e.g. {missing[:3]})")
    assign = np.array([r[2] for r in rows])
    model = ClusterModel(K=K, centroids=np.zeros((K, 0)), assignments=assign, objective=float("nan"))
    return cluster_support(model, bundle, bundle.train, mode=support_mode)


def _gan_inputs(records: Sequence[ImageRecord], size: int) -> list[ImageRecord]:
    out = []
    for r in records:
        r.load()
        px = r.pixels if r.pixels.shape[:2] == (size, size) else resize(r.pixels, size)
        out.append(ImageRecord(r.image_id, r.identity, r.camera, r.split, pixels=np.clip(px, -1, 1)))
    return out


def stage_gan(ws: Workspace, bundle: DatasetBundle, clusters: ClusterModel, gan_cfg: GanConfig,
              seed: int) -> list[GanPair]:
    train = bundle.train
    pairs = []
    g_seed = substream(seed, "gan")
    cfg = GanConfig(**{**gan_cfg.to_json(), "seed": g_seed})
    log_fields = ["step", "d_loss", "d_real", "d_fake", "g_loss"]
    for c in range(clusters.K):
        members = [r for r, a in zip(train, clusters.assignments) if a == c]
        if not members:
            pairs.append(init_pair(cfg, c))
            continue
        pair = train_gan(_gan_inputs(members, cfg.image_size), cfg, cluster_id=c)
        save_gan(pair, ws.path(f"gan/gan_c{c}.ckpt"))
        ws.add(f"gan/gan_c{c}.ckpt", "gan", "checkpoint", g_seed)
        log = io.CsvLog(ws.path(f"logs/gan_c{c}.csv"), log_fields)
        for h in pair.history:
            log.write(**h)
        ws.add(f"logs/gan_c{c}.csv", "gan", "log", g_seed)
        pairs.append(pair)
    return pairs


def stage_generate(ws: Workspace, bundle: DatasetBundle, clusters: ClusterModel, cfg: TrainConfig,
                   seed: int, pairs: Optional[Sequence[GanPair]] = None,
                   gan_size: Optional[int] = None) -> list[ImageRecord]:
    """Sample per cluster, quantize to PNG and persist with a manifest."""
    train = bundle.train
    total = len(train) if cfg.generated_total is None else cfg.generated_total
    sizes = np.bincount(clusters.assignments, minlength=clusters.K)
    counts = allocate_counts(sizes, total, cfg.allocation)
    s = substream(seed, "sample")
    out: list[ImageRecord] = []
    for c, n in enumerate(counts):
        if n == 0 or sizes[c] == 0:
            continue
        if cfg.generator == "dcgan":
            recs = sample(pairs[c], n, seed=s, start_index=0)
        else:
            members = [r for r, a in zip(train, clusters.assignments) if a == c]
            if gan_size:
                members = _gan_inputs(members, gan_size)
            recs = pseudo_generator_sample(members, n, cfg.pseudo_noise, seed=substream(s, c), cluster_id=c)
        out.extend(recs)
    gen_dir = ws.path("generated/.keep").parent
    entries = []
    for r in out:
        q = unit_to_bytes(r.pixels)
        fname = f"{r.image_id}.png"
        Image.fromarray(q).save(gen_dir / fname)
        r.pixels = bytes_to_unit(q)
        r.path = str(gen_dir / fname)
        entries.append({"file": fname, "cluster": int(r.cluster), "seed": s})
    (gen_dir / "manifest.json").write_text(json.dumps(entries, indent=1))
    ws.add("generated/manifest.json", "generate", "generated", s)
    for e in entries:
        ws.manifest["artifacts"].append({"path": f"generated/{e['file']}", "stage": "generate",
                                         "kind": "generated", "seed": s, "config_hash": ws.config_hash})
    ws.save()
    return out


def load_generated(gen_dir) -> list[ImageRecord]:
    gen_dir = Path(gen_dir)
    entries = json.loads((gen_dir / "manifest.json").read_text())
    return [ImageRecord(image_id=Path(e["file"]).stem, identity=-1, camera=0, split="generated",
                        path=str(gen_dir / e["file"]), cluster=int(e["cluster"])) for e in entries]


def stage_train(ws: Workspace, bundle: DatasetBundle, generated: Sequence[ImageRecord],
                clusters: Optional[ClusterModel], cfg: TrainConfig, backbone_cfg: BackboneConfig,
                pre: PreprocessConfig, seed: int) -> ModelState:
    n = bundle.n_identities
    if cfg.scheme == "none":
        generated = []
    targets = generated_targets(cfg.scheme, generated, clusters, n) if generated else []
    if targets:
        ws.path("generated/targets.json").write_text(json.dumps([t.to_json() for t in targets]))
        ws.add("generated/targets.json", "train", "targets", seed)
    sup, _ = supervised_records(bundle, cfg.validation_holdout)
    s = substream(seed, "final")
    log = io.CsvLog(ws.path("logs/train.csv"), ["step", "lr", "loss", "real_loss", "gen_loss"])
    model = joint_train(bundle, sup, generated, targets, cfg, backbone_cfg, pre, s, log)
    save_model(model, ws.path("final.ckpt"), {"seed": s, "scheme": cfg.scheme})
    ws.add("final.ckpt", "train", "checkpoint", s)
    ws.add("logs/train.csv", "train", "log", s)
    return model


def evaluate_model(model: ModelState, bundle: DatasetBundle, pre: PreprocessConfig,
                   eval_cfg: EvalConfig) -> dict:
    query, gallery = bundle.split("query"), bundle.split("gallery")
    if not query or not gallery:
        raise ValueError("bundle has no query/gallery split")
    qf = extract_features(model, query, pre, layer=eval_cfg.feature_layer).values
    gf = extract_features(model, gallery, pre, layer=eval_cfg.feature_layer).values
    q_ids = np.array([r.identity for r in query])
    q_cams = np.array([r.camera for r in query])
    g_ids = np.array([r.identity for r in gallery])
    g_cams = np.array([r.camera for r in gallery])
    protocol = "market_single"
    if eval_cfg.multi_query:
        qf, q_ids, q_cams = average_multi_query(qf, q_ids, q_cams)
        protocol = "market_multi"
    results = {"l2": cmc_map(pairwise_l2(qf, gf), q_ids, q_cams, g_ids, g_cams, protocol)}
    if eval_cfg.rerank:
        if len({int(i) for i in g_ids}) == len(g_ids):
            logger.warning("re-ranking assumes several positives per identity in the gallery")
        d = rerank_k_reciprocal(qf, gf, eval_cfg.k1, eval_cfg.k2, eval_cfg.lambda_value)
        results["rerank"] = cmc_map(d, q_ids, q_cams, g_ids, g_cams, protocol)
    return results


def stage_eval(ws: Workspace, model: ModelState, bundle: DatasetBundle, pre: PreprocessConfig,
               eval_cfg: EvalConfig, extra: Optional[dict] = None, seed: int = 0) -> dict:
    results = evaluate_model(model, bundle, pre, eval_cfg)
    report = results["l2"].report()
    if "rerank" in results:
        report["rerank"] = results["rerank"].report()
    report.update(extra or {})
    ws.path("report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    ws.add("report.json", "eval", "report", seed)
    if eval_cfg.plot:
        plot_cmc(results, ws.path("cmc.png"))
        ws.add("cmc.png", "eval", "report", seed)
    return report


@dataclass
class PipelineResult:
    model: ModelState
    clusters: Optional[ClusterModel]
    manifest: dict
    report: dict
    generated: list = field(default_factory=list)


def run_pipeline(bundle: DatasetBundle, cfg: TrainConfig, backbone_cfg: BackboneConfig, gan_cfg: GanConfig,
                 output_dir, preprocess: Optional[PreprocessConfig] = None,
                 eval_cfg: Optional[EvalConfig] = None) -> PipelineResult:
    """Stage-1 training, clustering, per-cluster GANs, generation with sparse
    labels, joint training and evaluation; every stage persists artifacts."""
    eval_cfg = eval_cfg or EvalConfig()
    pre = resolve_preprocess(bundle, preprocess or PreprocessConfig(resize_to=backbone_cfg.input_size,
                                                                    crop_to=backbone_cfg.input_size))
    h = config_hash(cfg.to_json(), backbone_cfg.to_json(), gan_cfg.to_json(), asdict(pre), eval_cfg.to_json())
    ws = Workspace(output_dir, h)
    seed = cfg.seed
    clusters = None
    generated: list[ImageRecord] = []
    stage = "train-features"
    try:
        if cfg.scheme != "none":
            feat_model = stage_features(ws, bundle, cfg, backbone_cfg, pre, seed)
            stage = "cluster"
            clusters = stage_cluster(ws, feat_model, bundle, cfg, pre, seed)
            pairs = None
            if cfg.generator == "dcgan":
                stage = "gan"
                pairs = stage_gan(ws, bundle, clusters, gan_cfg, seed)
            stage = "generate"
            generated = stage_generate(ws, bundle, clusters, cfg, seed, pairs, gan_size=gan_cfg.image_size)
        stage = "train"
        model = stage_train(ws, bundle, generated, clusters, cfg, backbone_cfg, pre, seed)
        stage = "eval"
        extra = {"scheme": cfg.scheme, "seed": seed, "config_hash": h, "K": cfg.K,
                 "generated": len(generated)}
        if clusters is not None:
            extra["p_c"] = clusters.p_c
        report = stage_eval(ws, model, bundle, pre, eval_cfg, extra, seed)
    except Exception as e:
        ws.manifest["failed_stage"] = stage
        ws.save()
        raise StageError(stage, e) from e
    return PipelineResult(model, clusters, ws.manifest, report, generated)
