"""Episodic training, evaluation and checkpoint handling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import checkpoint as ckpt
from . import numerics as nx
from .config import TrainConfig, config_from_metadata
from .encoder import EncoderParams, encode
from .episodes import (DEFAULT_FAMILIES, DOMAINS, Episode, GenerationError, episode_seed,
                       sample_episode)
from .gape import (DegenerateSupportError, GapeMlpParams, GridSpec, PrototypeSet, ProjParams,
                   enrich, enrich_background_variant, pool_prototypes)
from .geometry import bin_histogram, bin_map, downsample_mask
from .matcher import LossBundle, ScoreMaps, align_loss, classify, query_reweight, seg_loss, total_loss
from .metrics import EvalRecord, bhattacharyya, dsc
from .numerics import ContractError, DiffTensor
from .osb import BinPrediction, OsbParams, bin_mae, loss_osb, predict_bins

log = logging.getLogger(__name__)

PE_CHANNELS = 16
STREAM_TRAIN, STREAM_HELDOUT, STREAM_EVAL = 0, 1, 2


def sinusoid_code(h: int, w: int, n_channels: int = PE_CHANNELS) -> np.ndarray:
    """Fixed 2-d sinusoidal position code, n_channels x h x w."""
    n_freq = n_channels // 4
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    chans = []
    for f in range(n_freq):
        scale = np.pi * 2.0 ** f
        for coord, size in ((yy, h), (xx, w)):
            phase = scale * (coord + 0.5) / size
            chans.extend([np.sin(phase), np.cos(phase)])
    return np.stack(chans)


@dataclass
class ModelParams:
    encoder: EncoderParams
    osb: OsbParams
    mlp: GapeMlpParams
    proj: ProjParams
    pe_proj: DiffTensor  # C x PE_CHANNELS
    mlp_bg: GapeMlpParams

    @classmethod
    def init(cls, config: TrainConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng([int(seed), 7919])
        enc = EncoderParams.init(rng, 1, config.channel_list, _strides(config))
        C = enc.out_channels
        return cls(
            encoder=enc,
            osb=OsbParams.init(rng, C, config.K),
            mlp=GapeMlpParams.init(rng, C, config.hidden, config.mlp_bias),
            proj=ProjParams.init(rng, C),
            pe_proj=nx.param(rng.uniform(-1e-4, 1e-4, size=(C, PE_CHANNELS))),
            mlp_bg=GapeMlpParams.init(rng, C, config.hidden, config.mlp_bias),
        )

    def groups(self) -> dict[str, dict[str, DiffTensor]]:
        return {
            "encoder": self.encoder.tensors(),
            "osb": self.osb.tensors(),
            "gape": self.mlp.tensors(),
            "proj": self.proj.tensors(),
            "pe": {"proj": self.pe_proj},
            "bg": self.mlp_bg.tensors(),
        }

    def named(self) -> dict[str, DiffTensor]:
        return {f"{g}.{n}": t for g, ts in self.groups().items() for n, t in ts.items()}

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.values for k, t in self.named().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = self.named()
        missing = set(named) - set(state)
        if missing:
            raise ckpt.CheckpointFormatError(f"checkpoint lacks tensors: {sorted(missing)}")
        for k, t in named.items():
            if state[k].shape != t.shape:
                raise ckpt.CheckpointFormatError(f"{k}: shape {state[k].shape}, expected {t.shape}")
            t.values = np.array(state[k], dtype=np.float64)


def _strides(config: TrainConfig) -> tuple[int, ...]:
    n = len(config.channel_list)
    return tuple(2 if i % 2 == 1 else 1 for i in range(n))


def active_groups(config: TrainConfig) -> set[str]:
    """Parameter groups that can receive gradient under a config."""
    out = {"encoder"}
    if config.osb_loss or config.enrichment:
        out.add("osb")
    if config.enrichment:
        out.add("gape")
        if config.fusion == "concat_proj":
            out.add("proj")
    if config.position_embedding:
        out.add("pe")
    if config.bg_enrich:
        out.add("bg")
    return out


@dataclass
class OptimizerState:
    buffers: dict[str, np.ndarray]
    lr: float
    episode: int = 0

    @classmethod
    def init(cls, params: ModelParams, config: TrainConfig) -> "OptimizerState":
        return cls({k: np.zeros(t.shape) for k, t in params.named().items()}, config.lr, 0)


def sgd_step(params: dict[str, DiffTensor], state: OptimizerState, config: TrainConfig) -> None:
    """SGD with momentum and L2 weight decay; one call per episode.

    v <- mu v + (g + wd theta); theta <- theta - lr v. The learning rate is
    multiplied by ``lr_decay`` after every ``lr_decay_every`` episodes. A
    parameter whose grad is None is treated as having zero gradient, but at
    least one gradient must be present.
    """
    if not any(t.grad is not None for t in params.values()):
        raise ContractError("sgd_step called without any populated gradient")
    mu, wd, lr = config.momentum, config.weight_decay, state.lr
    for name, t in params.items():
        g = t.grad if t.grad is not None else 0.0
        v = state.buffers.get(name)
        if v is None:
            v = np.zeros(t.shape)
        v = mu * v + (g + wd * t.values)
        state.buffers[name] = v
        t.values = t.values - lr * v
    state.episode += 1
    if state.episode % config.lr_decay_every == 0:
        state.lr = state.lr * config.lr_decay


# -- forward pipeline --------------------------------------------------------
@dataclass
class EpisodeOutput:
    scores: ScoreMaps
    mask_q: np.ndarray  # query mask at feature resolution
    mask_s: list[np.ndarray]
    gt_bins_s: list
    binpred_s: list[Optional[BinPrediction]]
    protos: PrototypeSet
    feat_s: list[DiffTensor]
    feat_q: DiffTensor
    grid: GridSpec


def _union(sets: list[PrototypeSet]) -> PrototypeSet:
    if len(sets) == 1:
        return sets[0]
    cat = lambda xs: nx.concat(xs, axis=0) if all(x is not None for x in xs) else None
    bgs = [s.bg for s in sets if s.bg is not None]
    return PrototypeSet(
        fg_cells=np.concatenate([s.fg_cells for s in sets]),
        fg_raw=cat([s.fg_raw for s in sets]),
        bg_cells=np.concatenate([s.bg_cells for s in sets]),
        bg=nx.concat(bgs, axis=0) if bgs else None,
        fg_enriched=cat([s.fg_enriched for s in sets]),
        fg_meandist=cat([s.fg_meandist for s in sets]),
        K=sets[0].K,
    )


def forward(params: ModelParams, episode: Episode, config: TrainConfig) -> EpisodeOutput:
    feats_s = [encode(img, params.encoder) for img, _ in episode.support]
    feat_q = encode(episode.query[0], params.encoder)
    C, h, w = feat_q.shape
    grid = GridSpec(config.G, h, w, config.tau_occ)
    masks_s = [downsample_mask(m, h, w) for _, m in episode.support]
    mask_q = downsample_mask(episode.query[1], h, w)
    need_osb = config.osb_loss or config.enrichment or config.query_reweight_tau > 0
    gt_bins = [bin_map(m, config.K) for m in masks_s]
    binpreds = [predict_bins(f, params.osb) if need_osb else None for f in feats_s]

    pe = None
    if config.position_embedding:
        code = DiffTensor(sinusoid_code(h, w).reshape(PE_CHANNELS, -1))
        pe = nx.matmul(params.pe_proj, code).reshape(C, h, w)

    sets = []
    for f, m, bp in zip(feats_s, masks_s, binpreds):
        pooled_feat = f + pe if pe is not None else f
        ps = pool_prototypes(pooled_feat, m, grid)
        if config.enrichment:
            ps = enrich(ps, bp, grid, params.mlp, config.fusion, params.proj,
                        mask=m if config.expected_bin_masked else None)
        if config.bg_enrich:
            ps = enrich_background_variant(ps, m, grid, params.mlp_bg)
        sets.append(ps)
    protos = _union(sets)

    if config.query_reweight_tau > 0 and protos.fg_meandist is not None:
        bq = predict_bins(feat_q, params.osb)
        scores = query_reweight(feat_q, protos, bq, config.query_reweight_tau)
    else:
        scores = classify(feat_q, protos)
    return EpisodeOutput(scores, mask_q, masks_s, gt_bins, binpreds, protos, feats_s, feat_q, grid)


def episode_losses(out: EpisodeOutput, config: TrainConfig) -> LossBundle:
    L_seg = seg_loss(out.scores, out.mask_q, config.alpha)
    aligns = [align_loss(f, m, out.feat_q, out.scores.mask, out.grid, config.alpha)
              for f, m in zip(out.feat_s, out.mask_s)]
    L_align = aligns[0] if len(aligns) == 1 else nx.stack(aligns).mean()
    if config.osb_loss:
        parts = [loss_osb(bp, gt, config.lambda_dist) for bp, gt in zip(out.binpred_s, out.gt_bins_s)]
        L_osb = parts[0] if len(parts) == 1 else nx.stack(parts).mean()
        lam = config.lambda_geo
    else:
        L_osb, lam = DiffTensor(0.0), 0.0
    return total_loss(L_seg, L_align, L_osb, lam)


def make_record(out: EpisodeOutput, episode: Episode, config: TrainConfig) -> EvalRecord:
    bp = out.binpred_s[0]
    mae = bin_mae(bp, out.gt_bins_s[0]) if bp is not None else math.nan
    q_bins = bin_map(out.mask_q, config.K)
    bc = bhattacharyya(bin_histogram(out.gt_bins_s[0]), bin_histogram(q_bins))
    return EvalRecord(episode.seed, dsc(out.scores.mask, out.mask_q), mae, bc,
                      episode.family, episode.domain)


def run_episode(params: ModelParams, episode: Episode, config: TrainConfig,
                backward: bool = True) -> tuple[LossBundle, EvalRecord]:
    """Forward, losses and (optionally) backward for one episode; no parameter update."""
    params.zero_grad()
    out = forward(params, episode, config)
    bundle = episode_losses(out, config)
    if backward:
        nx.backward(bundle.total)
    return bundle, make_record(out, episode, config)


# -- data streams ---------------------------------------------------------------
def _families(names):
    return {n: DEFAULT_FAMILIES[n] for n in names}


def feature_grid(config: TrainConfig) -> GridSpec:
    s = int(np.prod(_strides(config)))
    n = config.image_size // s
    return GridSpec(config.G, n, n, config.tau_occ)


def make_episode(config: TrainConfig, seed: int, split: str = "train",
                 domain: str | None = None) -> Episode:
    if split == "train":
        fams = _families(config.family_list)
        dom = DOMAINS[domain or config.source_domain]
    else:
        fams = _families(config.eval_family_list)
        dom = DOMAINS[domain or config.target_domain]
    fams = {k: v if v.image_size == config.image_size else
            type(v)(v.kind, v.size_range, v.shape_range, config.image_size) for k, v in fams.items()}
    return sample_episode(fams, dom, dom, seed, feature_grid(config), split=split, shots=config.shots)


def heldout_episodes(config: TrainConfig, master_seed: int) -> list[Episode]:
    return [make_episode(config, episode_seed(master_seed, i, STREAM_HELDOUT))
            for i in range(config.heldout_episodes)]


def predict(params: ModelParams, episode: Episode, config: TrainConfig) -> tuple[EpisodeOutput, EvalRecord]:
    with nx.no_grad():
        out = forward(params, episode, config)
    return out, make_record(out, episode, config)


def heldout_summary(params: ModelParams, episodes: list[Episode], config: TrainConfig) -> dict:
    recs = [predict(params, ep, config)[1] for ep in episodes]
    maes = [r.bin_mae for r in recs if not math.isnan(r.bin_mae)]
    return {"bin_mae": float(np.mean(maes)) if maes else math.nan,
            "dsc": float(np.mean([r.dsc for r in recs]))}


# -- checkpoints -------------------------------------------------------------------
def save_checkpoint(path, params: ModelParams, config: TrainConfig, episode: int, lr: float, seed: int):
    meta = config.as_dict()
    meta.update(ckpt_episode=str(episode), ckpt_lr=repr(lr), ckpt_seed=str(seed))
    return ckpt.save(path, params.state(), meta)


def load_checkpoint(path) -> tuple[ModelParams, TrainConfig, dict[str, str]]:
    state, meta = ckpt.load(path)
    config = config_from_metadata(meta)
    params = ModelParams.init(config, 0)
    params.load_state(state)
    return params, config, meta


# -- training loop -----------------------------------------------------------------------
LOG_COLUMNS = ["episode", "L_seg", "L_align", "L_OSB", "lr"]
HELDOUT_COLUMNS = ["episode", "bin_mae", "dsc"]


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict] = field(default_factory=list)
    heldout: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _checkpoint_point(params, config, opt, master_seed, held, result, run_dir, n):
    summary = heldout_summary(params, held, config) if held else {"bin_mae": math.nan, "dsc": math.nan}
    result.heldout.append({"episode": n, **summary})
    if run_dir is not None:
        result.checkpoints.append(
            save_checkpoint(Path(run_dir) / f"ck_{n}", params, config, n, opt.lr, master_seed))
    log.info("episode %d: held-out bin MAE %.4f, DSC %.4f", n, summary["bin_mae"], summary["dsc"])


def train(config: TrainConfig, master_seed: int, run_dir: str | Path | None = None,
          progress: Callable[[int, LossBundle], None] | None = None) -> TrainResult:
    """Episodic SGD. Checkpoints (and held-out bin MAE) every ``checkpoint_every`` episodes."""
    params = ModelParams.init(config, master_seed)
    opt = OptimizerState.init(params, config)
    groups = active_groups(config)
    trainable = {f"{g}.{n}": t for g, ts in params.groups().items() if g in groups for n, t in ts.items()}
    held = heldout_episodes(config, master_seed) if config.heldout_episodes > 0 else []
    result = TrainResult(params)
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
    _checkpoint_point(params, config, opt, master_seed, held, result, run_dir, 0)

    for i in range(config.episodes):
        bundle = None
        for attempt in range(21):
            seed = episode_seed(master_seed, i * 32 + attempt, STREAM_TRAIN)
            try:
                episode = make_episode(config, seed)
                bundle, _ = run_episode(params, episode, config)
                break
            except DegenerateSupportError:
                continue
        if bundle is None:
            raise GenerationError(f"episode {i}: no usable episode after 20 resamples")
        vals = bundle.values()
        if not all(np.isfinite(v) for v in vals.values()):
            raise FloatingPointError(f"episode {i}: non-finite loss {vals}")
        result.log.append({"episode": i + 1, "L_seg": vals["L_seg"], "L_align": vals["L_align"],
                           "L_OSB": vals["L_OSB"], "lr": opt.lr})
        sgd_step(trainable, opt, config)
        if progress is not None:
            progress(i + 1, bundle)
        n = i + 1
        if n % config.checkpoint_every == 0 or n == config.episodes:
            _checkpoint_point(params, config, opt, master_seed, held, result, run_dir, n)
    return result


def evaluate(params: ModelParams, config: TrainConfig, n_episodes: int | None = None,
             domain: str | None = None, seed: int | None = None,
             on_output: Callable[[int, Episode, EpisodeOutput], None] | None = None) -> list[EvalRecord]:
    """Hard-argmax evaluation on fresh episodes; parameters are not touched."""
    n = config.eval_episodes if n_episodes is None else n_episodes
    seed = config.eval_seed if seed is None else seed
    which = domain or config.eval_domain
    domains = [config.source_domain, config.target_domain] if which == "both" else \
        [config.source_domain if which == "source" else config.target_domain]
    records = []
    for dom in domains:
        for i in range(n):
            ep = make_episode(config, episode_seed(seed, i, STREAM_EVAL), split="eval", domain=dom)
            out, rec = predict(params, ep, config)
            records.append(rec)
            if on_output is not None:
                on_output(i, ep, out)
    return records
