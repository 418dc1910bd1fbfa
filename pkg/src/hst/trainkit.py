"""Two-phase training: tokenizer pretraining, then frozen-quantizer classification.

Checkpoint file layout (all integers little-endian)::

    magic        8 bytes   b"HSTCKPT\\x00"
    version      uint32
    payload_len  uint64
    sha256       32 bytes  digest of the payload
    payload      meta_len (uint64) | meta JSON (UTF-8, sorted keys) | tensor blob

The meta JSON holds the training config, step counter, phase, metric history
and a tensor index ``[{section, name, dtype, shape, offset, nbytes}]`` into the
blob. Tensors are written in sorted name order, so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TrainConfig, to_dict, train_config_from_dict
from .dataio import WindowSet
from .hquant import ROLES, codebook_metrics
from .model import HSTModel

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"HSTCKPT\x00"
_HEADER = struct.Struct("<8sIQ32s")


class CheckpointError(RuntimeError):
    pass


class ChecksumError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, snapshot: dict):
        super().__init__(msg)
        self.snapshot = snapshot


@dataclass
class HstCheckpoint:
    config: TrainConfig
    model_state: dict[str, torch.Tensor]
    step: int = 0
    history: list[dict] = field(default_factory=list)
    classifier_state: dict[str, torch.Tensor] | None = None
    phase: str = "tokenizer"
    format_version: int = FORMAT_VERSION


# ---------------------------------------------------------------- persistence

def _tensor_bytes(t: torch.Tensor) -> tuple[str, list[int], bytes]:
    arr = t.detach().cpu().contiguous().numpy()
    return arr.dtype.str, list(arr.shape), arr.tobytes()


def checkpoint_bytes(ckpt: HstCheckpoint) -> bytes:
    index, chunks, offset = [], [], 0
    sections = [("model", ckpt.model_state)]
    if ckpt.classifier_state is not None:
        sections.append(("classifier", ckpt.classifier_state))
    for section, state in sections:
        for name in sorted(state):
            dtype, shape, raw = _tensor_bytes(state[name])
            index.append({"section": section, "name": name, "dtype": dtype, "shape": shape,
                          "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    meta = {
        "config": to_dict(ckpt.config),
        "step": ckpt.step,
        "phase": ckpt.phase,
        "history": ckpt.history,
        "has_classifier": ckpt.classifier_state is not None,
        "tensors": index,
    }
    meta_raw = json.dumps(meta, sort_keys=True, allow_nan=False).encode("utf-8")
    payload = struct.pack("<Q", len(meta_raw)) + meta_raw + b"".join(chunks)
    header = _HEADER.pack(MAGIC, ckpt.format_version, len(payload), hashlib.sha256(payload).digest())
    return header + payload


def save_checkpoint(ckpt: HstCheckpoint, path: str | Path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)
    return path


def checkpoint_from_bytes(data: bytes) -> HstCheckpoint:
    if len(data) < _HEADER.size:
        raise ChecksumError("checkpoint truncated inside header")
    magic, version, n, digest = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not an HST checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} needs migration to version {FORMAT_VERSION}"
        )
    payload = data[_HEADER.size:]
    if len(payload) != n or hashlib.sha256(payload).digest() != digest:
        raise ChecksumError(f"checkpoint checksum mismatch (payload {len(payload)} of {n} bytes)")
    (meta_len,) = struct.unpack_from("<Q", payload)
    meta = json.loads(payload[8:8 + meta_len].decode("utf-8"))
    blob = payload[8 + meta_len:]
    states: dict[str, dict[str, torch.Tensor]] = {"model": {}, "classifier": {}}
    for entry in meta["tensors"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        states[entry["section"]][entry["name"]] = torch.from_numpy(arr)
    return HstCheckpoint(
        config=train_config_from_dict(meta["config"]),
        model_state=states["model"],
        step=meta["step"],
        history=meta["history"],
        classifier_state=states["classifier"] if meta["has_classifier"] else None,
        phase=meta["phase"],
        format_version=version,
    )


def load_checkpoint(path: str | Path) -> HstCheckpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def build_model(ckpt: HstCheckpoint) -> HSTModel:
    """Instantiate the tokenizer from the configuration stored in the checkpoint."""
    model = HSTModel(ckpt.config.model)
    model.load_state_dict(ckpt.model_state)
    return model


def build_classifier(ckpt: HstCheckpoint) -> nn.Module:
    clf = make_classifier(ckpt.config)
    if ckpt.classifier_state is None:
        raise CheckpointError("checkpoint holds no classifier; run train_classifier first")
    clf.load_state_dict(ckpt.classifier_state)
    return clf


def _state(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def codebook_hash(model_or_state) -> str:
    state = model_or_state.state_dict() if isinstance(model_or_state, nn.Module) else model_or_state
    h = hashlib.sha256()
    for name in sorted(k for k in state if k.startswith("quantizer.")):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- phase 1

def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of index batches drawn from successive random permutations."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield perm[i:i + batch_size]


def step_metrics(step: int, loss: dict[str, float], tokens, cfg: TrainConfig) -> dict:
    q = cfg.model.quantizer
    rec = {"step": step, **loss}
    if q.mode == "continuous":
        return rec
    sizes = {"state": q.state_codes, "transition": q.transition_codes,
             "state_residual": q.state_residual_codes, "transition_residual": q.transition_residual_codes}
    streams = {"state": tokens.state_tokens, "transition": tokens.transition_tokens,
               "state_residual": tokens.state_residual_tokens,
               "transition_residual": tokens.transition_residual_tokens}
    roles = ROLES if q.mode == "hierarchical" else ROLES[:2]
    for role in roles:
        m = codebook_metrics(streams[role], sizes[role])
        rec[f"{role}_perplexity"] = m["perplexity"]
        rec[f"{role}_dead_codes"] = m["dead_codes"]
    return rec


def _snapshot(model: nn.Module, step: int, loss: dict) -> dict:
    norms = {k: float(v.detach().norm()) for k, v in model.state_dict().items() if v.is_floating_point()}
    return {"step": step, "loss": loss, "param_norms": norms}


def train_tokenizer(
    data: WindowSet,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
    init: HstCheckpoint | None = None,
    log_every: int = 100,
) -> HstCheckpoint:
    """Phase 1: optimize the reconstruction + codebook objective for ``cfg.phase1_steps`` steps.

    Each step runs forward, loss, an Adam update, then the usage-count and
    revival update on the codebooks. Codebooks are k-means++ seeded from the
    first batch's features.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    model = build_model(init) if init is not None else HSTModel(cfg.model)
    history = list(init.history) if init is not None else []
    start = init.step if init is not None else 0
    if cfg.phase1_steps == 0:
        return HstCheckpoint(copy.deepcopy(cfg), _state(model), start, history)

    rng = np.random.default_rng(cfg.seed)
    stream = batches(len(data), cfg.batch_size, rng)
    X_all = torch.from_numpy(data.windows)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    metrics_fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    revive = cfg.model.quantizer.revival and model.mode != "continuous"
    model.train()
    try:
        for step in range(start + 1, start + cfg.phase1_steps + 1):
            X = X_all[next(stream)]
            if not bool(model.quantizer.initialized) and model.mode != "continuous":
                model.init_codebooks(X, seed=cfg.seed)
            out = model(X)
            loss = model.loss(X, out, cfg.loss)
            floats = loss.as_floats()
            if not np.isfinite(floats["total"]):
                raise TrainingDiverged(f"non-finite loss at step {step}: {floats}", _snapshot(model, step, floats))
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            opt.step()
            model.quantizer.repin()
            if revive:
                model.quantizer.revive(out.pair.o_seq, out.pair.h_seq, out.tokens)
            rec = step_metrics(step, floats, out.tokens, cfg)
            history.append(rec)
            if metrics_fh:
                metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if log_every and step % log_every == 0:
                log.info("step %d total %.5f recon %.5f", step, floats["total"], floats["recon"])
    finally:
        if metrics_fh:
            metrics_fh.close()
    return HstCheckpoint(copy.deepcopy(cfg), _state(model), start + cfg.phase1_steps, history)


# ---------------------------------------------------------------- phase 2

def make_classifier(cfg: TrainConfig) -> nn.Module:
    widths = [2 * cfg.model.ssm.hidden, *cfg.classifier_widths]
    layers: list[nn.Module] = []
    for a, b in zip(widths[:-1], widths[1:]):
        layers += [nn.Linear(a, b), nn.ReLU()]
    layers.append(nn.Linear(widths[-1], cfg.n_classes))
    return nn.Sequential(*layers)


def pooled_features(model: HSTModel, X: torch.Tensor, pooling: str) -> torch.Tensor:
    """Temporal mean of the concatenated (state, transition) embeddings, width 2D."""
    pair, _ = model.encode(X)
    if pooling == "continuous":
        z = torch.cat([pair.o_seq, pair.h_seq], dim=-1)
    else:
        tok = model.quantize(pair)
        z = torch.cat([tok.quantized_states, tok.quantized_transitions], dim=-1)
    return z.mean(dim=-2)


def train_classifier(ckpt: HstCheckpoint, data: WindowSet, cfg: TrainConfig | None = None,
                     metrics_path: str | Path | None = None) -> HstCheckpoint:
    """Phase 2: codebooks and decoder frozen; encoder, backbone and a 3-layer MLP trained.

    Windows inherit their subject's label; the objective is cross-entropy.
    """
    cfg = copy.deepcopy(cfg or ckpt.config)
    labels = np.unique(data.labels)
    if not set(labels.tolist()) <= set(range(cfg.n_classes)) or cfg.n_classes != 2:
        raise ValueError(f"binary labels {{0, 1}} required, got {labels.tolist()}")
    torch.manual_seed(cfg.seed)
    model = build_model(ckpt)
    clf = make_classifier(cfg)
    for p in list(model.quantizer.parameters()) + list(model.decoder.parameters()):
        p.requires_grad_(False)
    trainable = list(model.encoder.parameters()) + list(model.core.parameters()) + list(clf.parameters())
    opt = torch.optim.Adam(trainable, lr=cfg.phase2_learning_rate or cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)
    X_all = torch.from_numpy(data.windows)
    y_all = torch.from_numpy(data.labels)
    history = list(ckpt.history)
    fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    model.train()
    clf.train()
    step = ckpt.step
    try:
        for epoch in range(1, cfg.phase2_epochs + 1):
            perm = rng.permutation(len(data))
            tot, correct = 0.0, 0
            for i in range(0, len(perm), cfg.batch_size):
                idx = perm[i:i + cfg.batch_size]
                X, y = X_all[idx], y_all[idx]
                logits = clf(pooled_features(model, X, cfg.classifier_pooling))
                loss = F.cross_entropy(logits, y)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite classifier loss in epoch {epoch}",
                                           _snapshot(model, step, {"ce": float(loss)}))
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                step += 1
                tot += loss.item() * len(idx)
                correct += int((logits.argmax(-1) == y).sum())
            rec = {"epoch": epoch, "ce": tot / len(data), "train_acc": correct / len(data)}
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if fh:
            fh.close()
    return HstCheckpoint(cfg, _state(model), step, history, _state(clf), phase="classifier")


@torch.no_grad()
def predict_proba(ckpt: HstCheckpoint, data: WindowSet, batch_size: int = 64) -> np.ndarray:
    """Per-window positive-class probabilities from a classifier checkpoint."""
    model, clf = build_model(ckpt), build_classifier(ckpt)
    model.eval()
    clf.eval()
    X_all = torch.from_numpy(data.windows)
    out = []
    for i in range(0, len(data), batch_size):
        logits = clf(pooled_features(model, X_all[i:i + batch_size], ckpt.config.classifier_pooling))
        out.append(torch.softmax(logits, -1)[:, 1])
    return torch.cat(out).double().numpy()


@torch.no_grad()
def tokenize(ckpt: HstCheckpoint, data: WindowSet, batch_size: int = 64):
    """Run the frozen tokenizer; returns (TokenizedSequence, reconstruction) stacked over windows."""
    model = build_model(ckpt)
    model.eval()
    X_all = torch.from_numpy(data.windows)
    toks, recs = [], []
    for i in range(0, len(data), batch_size):
        out = model(X_all[i:i + batch_size])
        toks.append(out.tokens.detach())
        recs.append(out.x_hat)
    fields_ = toks[0].__dataclass_fields__
    merged = type(toks[0])(*(torch.cat([getattr(t, f) for t in toks]) for f in fields_))
    return merged, torch.cat(recs).numpy()
