"""Attention fusion of EEG/EXG patch tokens, probe training and splits."""
from __future__ import annotations

import csv
import copy
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .align import AlignConfig, AlignmentModel, PairArrays, embed, prepare_pairs
from .metrics import EvalReport


class ProbeMode(str, Enum):
    LINEAR_PROBE = "linear_probe"
    FINETUNE = "finetune"
    EEG_ONLY = "eeg_only"
    EXG_ONLY = "exg_only"

    @property
    def uses_eeg(self) -> bool:
        return self is not ProbeMode.EXG_ONLY

    @property
    def uses_exg(self) -> bool:
        return self is not ProbeMode.EEG_ONLY


class FusionHead(nn.Module):
    """Learned-query attention pooling over patch tokens, then a two-layer MLP."""

    def __init__(self, d_patch: int, n_classes: int, hidden: int = 64):
        super().__init__()
        self.d_patch = d_patch
        self.n_classes = n_classes
        self.hidden = hidden
        self.query = nn.Parameter(torch.randn(d_patch) / d_patch**0.5)
        self.key_proj = nn.Linear(d_patch, d_patch, bias=False)
        self.value_proj = nn.Linear(d_patch, d_patch, bias=False)
        self.classifier = nn.Sequential(nn.Linear(d_patch, hidden), nn.GELU(), nn.Linear(hidden, n_classes))

    def attend(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """tokens [..., T, D] -> (pooled [..., D], weights [..., T])."""
        if tokens.shape[-2] == 0:
            raise ValueError("cannot attend over zero tokens")
        logits = self.key_proj(tokens) @ self.query / self.d_patch**0.5
        weights = torch.softmax(logits, dim=-1)
        pooled = (weights.unsqueeze(-1) * self.value_proj(tokens)).sum(dim=-2)
        return pooled, weights

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.attend(tokens)[0])


def fuse(eeg: torch.Tensor, exg: torch.Tensor, head: FusionHead) -> torch.Tensor:
    """Attention-pool the 2P tokens of both modalities into one D_p vector."""
    eeg = torch.as_tensor(eeg)
    exg = torch.as_tensor(exg)
    if eeg.shape[-1] != exg.shape[-1]:
        raise ValueError(f"EEG dimension {eeg.shape[-1]} != EXG dimension {exg.shape[-1]}")
    if eeg.shape[-2] == 0 or exg.shape[-2] == 0:
        raise ValueError("fusion needs P >= 1 patches per modality")
    return head.attend(torch.cat([eeg, exg], dim=-2))[0]


def tokens_for(mode: ProbeMode, eeg: torch.Tensor | None, exg: torch.Tensor | None) -> torch.Tensor:
    if mode is ProbeMode.EEG_ONLY:
        return eeg
    if mode is ProbeMode.EXG_ONLY:
        return exg
    return torch.cat([eeg, exg], dim=-2)


def _embed_modes(model: AlignmentModel, data: PairArrays, mode: ProbeMode):
    eeg = embed(model, data.eeg, "eeg") if mode.uses_eeg else None
    exg = embed(model, data.exg, "exg") if mode.uses_exg else None
    return eeg, exg


@torch.no_grad()
def predict(data: PairArrays, model: AlignmentModel, head: FusionHead, mode: ProbeMode | str):
    mode = ProbeMode(mode)
    eeg, exg = _embed_modes(model, data, mode)
    head.eval()
    scores = torch.softmax(head(tokens_for(mode, eeg, exg)), dim=-1).double().numpy()
    return scores.argmax(axis=1), scores


def classify(pairs, model: AlignmentModel, head: FusionHead, mode: ProbeMode | str = "linear_probe",
             cfg: AlignConfig | None = None):
    """Returns (predictions, class scores, EvalReport)."""
    data = pairs if isinstance(pairs, PairArrays) else prepare_pairs(list(pairs), cfg or AlignConfig())
    bad = (data.labels < 0) | (data.labels >= head.n_classes)
    if bad.any():
        raise ValueError(f"label {int(data.labels[bad][0])} outside [0, {head.n_classes})")
    pred, scores = predict(data, model, head, mode)
    return pred, scores, EvalReport.from_predictions(data.labels, pred, head.n_classes, scores)


@dataclass
class ProbeConfig:
    n_classes: int = 3
    hidden: int = 64
    lr: float = 3e-3
    encoder_lr: float = 1e-5
    batch_size: int = 32
    epochs: int = 200
    patience: int = 10
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown ProbeConfig fields: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class ProbeResult:
    head: FusionHead
    best_epoch: int
    best_val_f1: float
    history: list[dict]


def train_probe(train: PairArrays, val: PairArrays, model: AlignmentModel, mode: ProbeMode | str,
                cfg: ProbeConfig | None = None) -> ProbeResult:
    """Train a fusion head; early-stops on validation macro-F1.

    Encoders stay frozen except in ``finetune`` mode, where they are updated
    at ``encoder_lr``. Frozen modes embed every split once up front.
    """
    cfg = cfg or ProbeConfig()
    mode = ProbeMode(mode)
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    for name, split in (("train", train), ("val", val)):
        bad = (split.labels < 0) | (split.labels >= cfg.n_classes)
        if bad.any():
            raise ValueError(f"{name} label {int(split.labels[bad][0])} outside [0, {cfg.n_classes})")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dtype = next(model.parameters()).dtype
    head = FusionHead(model.d_patch, cfg.n_classes, cfg.hidden).to(dtype)
    groups = [{"params": head.parameters(), "lr": cfg.lr}]
    finetune = mode is ProbeMode.FINETUNE
    if finetune:
        groups.append({"params": [p for p in model.parameters() if p.requires_grad], "lr": cfg.encoder_lr})
        cached = val_cached = None
    else:
        cached = _embed_modes(model, train, mode)
        val_cached = _embed_modes(model, val, mode)
    opt = torch.optim.Adam(groups)
    y = torch.as_tensor(train.labels)

    best = (-1.0, -1, copy.deepcopy(head.state_dict()), None)
    history = []
    stale = 0
    for epoch in range(cfg.epochs):
        head.train()
        if finetune:
            model.train()
        order = rng.permutation(len(train))
        for i in range(0, len(train), cfg.batch_size):
            idx = np.sort(order[i : i + cfg.batch_size])
            if finetune:
                eeg = model.encode_eeg(torch.as_tensor(train.eeg[idx], dtype=dtype)) if mode.uses_eeg else None
                exg = model.encode_exg(torch.as_tensor(train.exg[idx], dtype=dtype))
            else:
                eeg = cached[0][idx] if cached[0] is not None else None
                exg = cached[1][idx] if cached[1] is not None else None
            loss = F.cross_entropy(head(tokens_for(mode, eeg, exg)), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        model.eval()
        if finetune:
            _, _, report = classify(val, model, head, mode)
        else:
            head.eval()
            with torch.no_grad():
                scores = torch.softmax(head(tokens_for(mode, *val_cached)), dim=-1).double().numpy()
            report = EvalReport.from_predictions(val.labels, scores.argmax(axis=1), cfg.n_classes)
        history.append({"epoch": epoch, "train_loss": float(loss.detach()), "val_macro_f1": report.macro_f1,
                        "val_accuracy": report.accuracy})
        if report.macro_f1 > best[0]:
            enc_state = copy.deepcopy(model.state_dict()) if finetune else None
            best = (report.macro_f1, epoch, copy.deepcopy(head.state_dict()), enc_state)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    head.load_state_dict(best[2])
    if best[3] is not None:
        model.load_state_dict(best[3])
    head.eval()
    return ProbeResult(head, best[1], best[0], history)


# splits ---------------------------------------------------------------------


def allocate(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n items; ties go to the earlier split."""
    ratios = np.asarray(ratios, dtype=np.float64)
    quotas = n * ratios / ratios.sum()
    counts = np.floor(quotas).astype(int)
    remainder = quotas - counts
    for i in sorted(range(len(ratios)), key=lambda i: (-remainder[i], i))[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def split_subject_independent(pairs: Sequence, ratios=(3, 1, 1), seed: int = 0):
    """Partition subjects (not pairs) into train/val/test."""
    subjects = sorted({p.subject_id for p in pairs})
    if len(subjects) < len(ratios) + 2:
        raise ValueError(f"subject-independent 3:1:1 split needs at least 5 subjects, found {len(subjects)}")
    order = np.random.default_rng(seed).permutation(len(subjects))
    counts = allocate(len(subjects), ratios)
    bounds = np.cumsum([0, *counts])
    groups = [{subjects[k] for k in order[bounds[i] : bounds[i + 1]]} for i in range(len(counts))]
    return tuple([p for p in pairs if p.subject_id in g] for g in groups)


def split_pairs(pairs: Sequence, ratios=(3, 1, 1), seed: int = 0):
    """Random pair-level split (unstratified)."""
    if len(pairs) < len(ratios):
        raise ValueError(f"need at least {len(ratios)} pairs to split, got {len(pairs)}")
    order = np.random.default_rng(seed).permutation(len(pairs))
    bounds = np.cumsum([0, *allocate(len(pairs), ratios)])
    return tuple([pairs[k] for k in sorted(order[bounds[i] : bounds[i + 1]])] for i in range(len(ratios)))


# persistence ----------------------------------------------------------------


def save_head(path, head: FusionHead, mode: ProbeMode | str, meta: dict | None = None) -> Path:
    info = {"mode": ProbeMode(mode).value, "d_patch": head.d_patch, "n_classes": head.n_classes,
            "hidden": head.hidden, **(meta or {})}
    return checkpoint.save(path, head.state_dict(), kind="head", meta=info)


def load_head(path, dtype=torch.float32) -> tuple[FusionHead, ProbeMode, dict]:
    tensors, doc = checkpoint.load(path, kind="head")
    meta = doc["meta"]
    head = FusionHead(meta["d_patch"], meta["n_classes"], meta["hidden"]).to(dtype)
    checkpoint.load_into(head, tensors)
    head.eval()
    return head, ProbeMode(meta["mode"]), meta


def write_predictions(path, pair_ids, labels, pred, scores) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "label", "prediction", *[f"score_{c}" for c in range(scores.shape[1])]])
        for pid, y, p, s in zip(pair_ids, labels, pred, scores):
            w.writerow([pid, int(y), int(p), *[repr(float(v)) for v in s]])
    return path
