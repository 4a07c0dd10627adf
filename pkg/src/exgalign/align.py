"""Two-level EEG/EXG contrastive alignment.

Patch level: each EEG patch embedding is an anchor, the simultaneous EXG
patch is its positive and K negatives are drawn from the EXG patches of the
*other* sequences in the batch. Sequence level: flattened patch embeddings
are linearly projected per modality and contrasted CLIP-style over the
batch. Both levels are repeated for the 2x-upsampled and 1/2-downsampled EXG
variants, and the six terms are summed.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .augment import downsample2x, upsample2x
from .encoder import EEGEncoder, EncoderConfig, ExgEncoder, TinyEEGEncoder
from .sigcore import LabeledPair, lowpass, patchify, zscore

TERMS = ("L_p", "L_p'", "L_p''", "L_s", "L_s'", "L_s''")


class AlignmentError(RuntimeError):
    pass


@dataclass
class AlignConfig:
    lr_eeg: float = 1e-5
    lr_exg: float = 3e-4
    batch_sequences: int = 16
    negatives_per_anchor: int = 64
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    normalize_embeddings: bool = True
    symmetric_seq_loss: bool = False
    disable_patch_align: bool = False
    disable_seq_align: bool = False
    disable_sampling_aug: bool = False
    t_patch: float = 0.07
    t_seq: float = 0.07
    d_seq: int = 512
    window_sec: float = 5.0
    zscore: bool = True
    lowpass_hz: float | None = None

    def __post_init__(self):
        if self.batch_sequences < 2:
            raise ValueError("batch_sequences must be >= 2, otherwise no negatives exist")
        if self.t_patch <= 0 or self.t_seq <= 0:
            raise ValueError("temperatures must be positive")
        if self.negatives_per_anchor < 1:
            raise ValueError("negatives_per_anchor must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AlignConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown AlignConfig fields: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class PairArrays:
    """Patched, preprocessed pairs stacked for batching."""

    eeg: np.ndarray  # [N, P, C, M]
    exg: np.ndarray  # [N, P, C~, M~]
    labels: np.ndarray  # [N], -1 where unlabeled
    pair_ids: list[str] = field(default_factory=list)
    subject_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.eeg.shape[0]

    @property
    def n_patches(self) -> int:
        return self.eeg.shape[1]

    def subset(self, idx) -> "PairArrays":
        idx = np.asarray(idx, dtype=np.int64)
        return PairArrays(
            self.eeg[idx],
            self.exg[idx],
            self.labels[idx],
            [self.pair_ids[i] for i in idx],
            [self.subject_ids[i] for i in idx],
        )


def preprocess(rec, cfg: AlignConfig):
    if cfg.lowpass_hz is not None and cfg.lowpass_hz < rec.rate_hz / 2:
        rec = lowpass(rec, cfg.lowpass_hz)
    if cfg.zscore:
        rec = zscore(rec)
    return rec


def prepare_pairs(pairs: Sequence[LabeledPair], cfg: AlignConfig) -> PairArrays:
    if not pairs:
        raise ValueError("no pairs to prepare")
    eeg, exg = [], []
    for pair in pairs:
        g = patchify(preprocess(pair.eeg, cfg), cfg.window_sec)
        h = patchify(preprocess(pair.exg, cfg), cfg.window_sec)
        if g.n_patches != h.n_patches:
            raise ValueError(
                f"pair {pair.pair_id!r}: EEG yields {g.n_patches} patches but EXG {h.n_patches}"
            )
        eeg.append(g.patches)
        exg.append(h.patches)
    shapes = {(a.shape, b.shape) for a, b in zip(eeg, exg)}
    if len(shapes) != 1:
        raise ValueError(f"batch is not homogeneous in patch grid shape: {sorted(shapes)}")
    labels = np.array([-1 if p.label is None else int(p.label) for p in pairs], dtype=np.int64)
    return PairArrays(
        np.stack(eeg),
        np.stack(exg),
        labels,
        [p.pair_id for p in pairs],
        [p.subject_id for p in pairs],
    )


class AlignmentModel(nn.Module):
    def __init__(
        self,
        eeg_encoder: EEGEncoder | None,
        exg_encoder: ExgEncoder,
        n_patches: int,
        d_seq: int = 512,
        t_patch: float = 0.07,
        t_seq: float = 0.07,
    ):
        super().__init__()
        d = exg_encoder.d_patch
        if eeg_encoder is not None and eeg_encoder.d_patch != d:
            raise ValueError(
                f"EEG encoder emits dimension {eeg_encoder.d_patch} but the alignment head expects {d}"
            )
        if t_patch <= 0 or t_seq <= 0:
            raise ValueError("temperatures must be positive")
        self.eeg_encoder = eeg_encoder
        self.exg_encoder = exg_encoder
        self.n_patches = n_patches
        self.d_patch = d
        self.d_seq = d_seq
        self.t_patch = t_patch
        self.t_seq = t_seq
        self.proj_eeg = nn.Linear(n_patches * d, d_seq, bias=False)
        self.proj_exg = nn.Linear(n_patches * d, d_seq, bias=False)

    def encode_eeg(self, x: torch.Tensor) -> torch.Tensor:
        if self.eeg_encoder is None:
            raise AlignmentError("this model was loaded without an EEG encoder")
        return self.eeg_encoder(x)

    def encode_exg(self, x: torch.Tensor) -> torch.Tensor:
        return self.exg_encoder(x)

    def seq_eeg(self, p: torch.Tensor) -> torch.Tensor:
        return seq_project(p, self.proj_eeg.weight)

    def seq_exg(self, p: torch.Tensor) -> torch.Tensor:
        return seq_project(p, self.proj_exg.weight)

    def exg_side_parameters(self) -> list[nn.Parameter]:
        eeg_ids = {id(p) for p in self.eeg_encoder.parameters()} if self.eeg_encoder is not None else set()
        return [p for p in self.parameters() if id(p) not in eeg_ids]


def build_model(
    eeg_channels: int,
    exg_channels: int,
    n_patches: int,
    cfg: AlignConfig,
    enc_cfg: EncoderConfig | None = None,
    eeg_cfg: EncoderConfig | None = None,
) -> AlignmentModel:
    """Fresh model with the bundled stand-in EEG encoder, seeded from ``cfg.seed``."""
    enc_cfg = enc_cfg or EncoderConfig()
    eeg_cfg = eeg_cfg or enc_cfg
    torch.manual_seed(cfg.seed)
    eeg = TinyEEGEncoder(eeg_channels, eeg_cfg)
    exg = ExgEncoder(exg_channels, enc_cfg)
    return AlignmentModel(eeg, exg, n_patches, cfg.d_seq, cfg.t_patch, cfg.t_seq)


# losses ---------------------------------------------------------------------


def sample_patch_negatives(s: int, p: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Flat candidate indices [S, P, K]; drawn without replacement from other sequences."""
    available = (s - 1) * p
    if k > available:
        raise ValueError(
            f"requested K={k} negatives per anchor but only {available} exist "
            f"(S={s}, P={p}); shortfall {k - available}"
        )
    scores = rng.random((s, p, s * p))
    own = np.repeat(np.arange(s), p)
    mask = own[None, :] == np.arange(s)[:, None]  # [S, S*P]
    scores[np.broadcast_to(mask[:, None, :], scores.shape)] = np.inf
    return np.argsort(scores, axis=-1, kind="stable")[..., :k]


def patch_infonce(
    anchors: torch.Tensor,
    candidates: torch.Tensor,
    t_p: float,
    k: int,
    rng: np.random.Generator | None = None,
    *,
    normalize: bool = True,
    negatives: np.ndarray | None = None,
) -> torch.Tensor:
    """Patch-level InfoNCE with the positive included in the denominator."""
    anchors = torch.as_tensor(anchors)
    candidates = torch.as_tensor(candidates)
    s, p, d = anchors.shape
    if s < 2:
        raise ValueError("patch_infonce needs at least two sequences")
    if candidates.shape != anchors.shape:
        raise ValueError(f"anchor shape {tuple(anchors.shape)} != candidate shape {tuple(candidates.shape)}")
    if negatives is None:
        if rng is None:
            raise ValueError("either rng or explicit negatives must be given")
        negatives = sample_patch_negatives(s, p, k, rng)
    if normalize:
        anchors = F.normalize(anchors, dim=-1)
        candidates = F.normalize(candidates, dim=-1)
    pos = (anchors * candidates).sum(-1) / t_p
    flat = candidates.reshape(s * p, d)
    # sorted so the result depends only on set membership, not draw order
    neg_idx = torch.as_tensor(np.sort(np.asarray(negatives), axis=-1), dtype=torch.long)
    neg = torch.einsum("spd,spkd->spk", anchors, flat[neg_idx]) / t_p
    logits = torch.cat([pos.unsqueeze(-1), neg], dim=-1)
    return (torch.logsumexp(logits, dim=-1) - pos).mean()


def seq_project(patch_embeddings: torch.Tensor, proj: torch.Tensor) -> torch.Tensor:
    """Project flattened (patch-major) embeddings [..., P, D] with proj [D_s, P*D]."""
    e = torch.as_tensor(patch_embeddings)
    w = torch.as_tensor(proj)
    flat = e.reshape(*e.shape[:-2], e.shape[-2] * e.shape[-1])
    if w.dim() != 2 or w.shape[1] != flat.shape[-1]:
        raise ValueError(
            f"projection of shape {tuple(w.shape)} cannot map flattened embeddings of size {flat.shape[-1]}"
        )
    return flat @ w.T


def seq_infonce(
    eeg_seqs: torch.Tensor,
    exg_seqs: torch.Tensor,
    t_s: float,
    symmetric: bool = False,
    *,
    normalize: bool = True,
) -> torch.Tensor:
    eeg_seqs = torch.as_tensor(eeg_seqs)
    exg_seqs = torch.as_tensor(exg_seqs)
    if eeg_seqs.shape[0] < 2:
        raise ValueError("seq_infonce needs at least two sequences")
    if normalize:
        eeg_seqs = F.normalize(eeg_seqs, dim=-1)
        exg_seqs = F.normalize(exg_seqs, dim=-1)
    logits = eeg_seqs @ exg_seqs.T / t_s
    target = torch.arange(logits.shape[0])
    loss = F.cross_entropy(logits, target)
    if symmetric:
        loss = 0.5 * (loss + F.cross_entropy(logits.T, target))
    return loss


def augment_views(exg: np.ndarray, with_aug: bool = True) -> list[np.ndarray]:
    views = [exg]
    if with_aug:
        views += [upsample2x(exg), downsample2x(exg)]
    return views


def _as_arrays(batch, cfg: AlignConfig) -> PairArrays:
    if isinstance(batch, PairArrays):
        return batch
    return prepare_pairs(list(batch), cfg)


def total_loss(batch, model: AlignmentModel, cfg: AlignConfig, rng: np.random.Generator):
    """Joint objective; returns (total tensor, {term: float}) with disabled terms reported as 0."""
    if cfg.disable_patch_align and cfg.disable_seq_align:
        raise ValueError("no active loss terms: both patch and sequence alignment are disabled")
    data = _as_arrays(batch, cfg)
    if data.n_patches != model.n_patches:
        raise ValueError(f"batch has P={data.n_patches} but the model was built for P={model.n_patches}")
    dtype = next(model.parameters()).dtype
    p = model.encode_eeg(torch.as_tensor(data.eeg, dtype=dtype))
    s = model.seq_eeg(p) if not cfg.disable_seq_align else None
    terms: dict[str, torch.Tensor] = {}
    for suffix, view in zip(("", "'", "''"), augment_views(data.exg, not cfg.disable_sampling_aug)):
        q = model.encode_exg(torch.as_tensor(view, dtype=dtype))
        if not cfg.disable_patch_align:
            terms["L_p" + suffix] = patch_infonce(
                p, q, model.t_patch, cfg.negatives_per_anchor, rng, normalize=cfg.normalize_embeddings
            )
        if not cfg.disable_seq_align:
            terms["L_s" + suffix] = seq_infonce(
                s, model.seq_exg(q), model.t_seq, cfg.symmetric_seq_loss, normalize=cfg.normalize_embeddings
            )
    total = sum(terms.values())
    breakdown = {name: float(terms[name].detach()) if name in terms else 0.0 for name in TERMS}
    breakdown["total"] = float(total.detach())
    return total, breakdown


# training -------------------------------------------------------------------


@dataclass
class AlignResult:
    trace: list[dict]
    rng: np.random.Generator
    steps: int


def make_optimizer(model: AlignmentModel, cfg: AlignConfig) -> torch.optim.Optimizer:
    groups = []
    if model.eeg_encoder is not None:
        eeg_params = list(model.eeg_encoder.parameters())
        if cfg.lr_eeg > 0:
            groups.append({"params": eeg_params, "lr": cfg.lr_eeg})
        else:
            for prm in eeg_params:
                prm.requires_grad_(False)
    groups.append({"params": model.exg_side_parameters(), "lr": cfg.lr_exg})
    return torch.optim.Adam(groups)


def train_align(
    data,
    model: AlignmentModel,
    cfg: AlignConfig,
    on_step: Callable[[dict], None] | None = None,
) -> AlignResult:
    """Adam over two parameter groups; batch order is fixed by ``cfg.seed``."""
    data = _as_arrays(data, cfg)
    n = len(data)
    if n < cfg.batch_sequences:
        raise ValueError(f"dataset has {n} pairs, fewer than batch_sequences={cfg.batch_sequences}")
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(model, cfg)
    per_epoch = n // cfg.batch_sequences
    trace: list[dict] = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            idx = np.sort(order[b * cfg.batch_sequences : (b + 1) * cfg.batch_sequences])
            loss, parts = total_loss(data.subset(idx), model, cfg, rng)
            if not math.isfinite(parts["total"]):
                raise AlignmentError(f"non-finite loss at epoch {epoch}, batch {b} (step {step})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            row = {"epoch": epoch, "step": step, **parts}
            trace.append(row)
            if on_step is not None:
                on_step(row)
            step += 1
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    model.eval()
    return AlignResult(trace, rng, step)


def write_trace(path, trace: list[dict]) -> Path:
    import csv

    path = Path(path)
    cols = ["epoch", "step", *TERMS, "total"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in trace:
            w.writerow([row[c] if c in ("epoch", "step") else repr(float(row[c])) for c in cols])
    return path


# checkpoints ----------------------------------------------------------------


def save_alignment(path, model: AlignmentModel, cfg: AlignConfig, rng: np.random.Generator | None = None,
                   extra: dict | None = None) -> Path:
    eeg = model.eeg_encoder
    if eeg is not None and not isinstance(eeg, TinyEEGEncoder):
        raise AlignmentError("only the bundled stand-in EEG encoder can be checkpointed")
    meta = {
        "align_config": cfg.to_dict(),
        "encoder_config": model.exg_encoder.cfg.to_dict(),
        "eeg_encoder_config": eeg.cfg.to_dict() if eeg is not None else None,
        "eeg_channels": eeg.in_channels if eeg is not None else None,
        "exg_channels": model.exg_encoder.in_channels,
        "n_patches": model.n_patches,
        **(extra or {}),
    }
    rng_state = None
    if rng is not None:
        rng_state = {"numpy": rng.bit_generator.state, "torch": checkpoint.torch_rng_state()}
    return checkpoint.save(path, model.state_dict(), kind="alignment", meta=meta, rng_state=rng_state)


def load_alignment(path, with_eeg: bool = True, dtype=torch.float32) -> tuple[AlignmentModel, AlignConfig, dict]:
    tensors, doc = checkpoint.load(path, kind="alignment")
    meta = doc["meta"]
    cfg = AlignConfig.from_dict(meta["align_config"])
    exg = ExgEncoder(meta["exg_channels"], EncoderConfig(**meta["encoder_config"]))
    eeg = None
    if with_eeg:
        if meta.get("eeg_encoder_config") is None:
            raise checkpoint.CheckpointError(f"{path}: checkpoint carries no EEG encoder")
        eeg = TinyEEGEncoder(meta["eeg_channels"], EncoderConfig(**meta["eeg_encoder_config"]))
    model = AlignmentModel(eeg, exg, meta["n_patches"], cfg.d_seq, cfg.t_patch, cfg.t_seq).to(dtype)
    if not with_eeg:
        tensors = {k: v for k, v in tensors.items() if not k.startswith("eeg_encoder.")}
    checkpoint.load_into(model, tensors)
    model.eval()
    return model, cfg, doc


# inspection -----------------------------------------------------------------


@torch.no_grad()
def embed(model: AlignmentModel, x: np.ndarray, modality: str, chunk: int = 32) -> torch.Tensor:
    """Patch embeddings [N, P, D] in eval mode."""
    fn = model.encode_eeg if modality == "eeg" else model.encode_exg
    dtype = next(model.parameters()).dtype
    was = model.training
    model.eval()
    try:
        out = [fn(torch.as_tensor(x[i : i + chunk], dtype=dtype)) for i in range(0, len(x), chunk)]
    finally:
        model.train(was)
    return torch.cat(out)


@torch.no_grad()
def retrieval_accuracy(data: PairArrays, model: AlignmentModel, batch_size: int = 16) -> float:
    """Top-1 EEG->EXG sequence retrieval within consecutive batches."""
    s = F.normalize(model.seq_eeg(embed(model, data.eeg, "eeg")), dim=-1)
    t = F.normalize(model.seq_exg(embed(model, data.exg, "exg")), dim=-1)
    hits = total = 0
    for i in range(0, len(data) - batch_size + 1, batch_size):
        sim = s[i : i + batch_size] @ t[i : i + batch_size].T
        hits += int((sim.argmax(dim=1) == torch.arange(batch_size)).sum())
        total += batch_size
    if total == 0:
        raise ValueError(f"need at least {batch_size} pairs for retrieval")
    return hits / total


@dataclass
class SimilarityBlocks:
    """Jointly min-max normalised patch similarity blocks, rows EEG and columns EXG."""

    blocks: dict[tuple[str, str], np.ndarray]
    raw: dict[tuple[str, str], np.ndarray]
    pair_ids: tuple[str, str]

    def within_minus_cross(self) -> float:
        a, b = self.pair_ids
        diag = np.concatenate([np.diag(self.blocks[(a, a)]), np.diag(self.blocks[(b, b)])])
        cross = np.concatenate([self.blocks[(a, b)].ravel(), self.blocks[(b, a)].ravel()])
        return float(diag.mean() - cross.mean())


def similarity_matrix(pair_a: LabeledPair, pair_b: LabeledPair, model: AlignmentModel,
                      cfg: AlignConfig) -> SimilarityBlocks:
    data = prepare_pairs([pair_a, pair_b], cfg)
    p = F.normalize(embed(model, data.eeg, "eeg"), dim=-1).double().numpy()
    q = F.normalize(embed(model, data.exg, "exg"), dim=-1).double().numpy()
    ids = (pair_a.pair_id, pair_b.pair_id)
    raw = {(ids[i], ids[j]): p[i] @ q[j].T for i in range(2) for j in range(2)}
    lo = min(m.min() for m in raw.values())
    hi = max(m.max() for m in raw.values())
    span = hi - lo if hi > lo else 1.0
    blocks = {k: (v - lo) / span for k, v in raw.items()}
    return SimilarityBlocks(blocks, raw, ids)
