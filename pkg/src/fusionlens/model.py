"""Gated mixture-of-experts fusion transformer over concatenated modality sequences.

Frozen per-modality embedding encoders project tokens to a shared hidden
size; the joint sequence (a leading fusion CLS position, then the modality
blocks) feeds role-specialized experts.  Unique experts can only attend to
CLS plus their own modality; synergy and redundancy experts see everything.
A gate network mixes expert logits into the final prediction.

Flavors:

* ``moe``    — the full model (default),
* ``dense``  — a single full-visibility expert, no gate,
* ``pooled`` — modality features mean-pooled to one token each before the
  experts (ablation reference).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import (Tensor, attention_probs, concat, gelu, layer_norm,
                       linear, matmul, softmax_rows)
from .synthdata import Sample

__all__ = [
    "ModelConfig",
    "EncoderBank",
    "JointSequence",
    "ExpertBundle",
    "FusionModel",
    "MaskContractError",
    "samples_to_arrays",
    "save_checkpoint",
    "load_checkpoint",
]

CLS_SEGMENT = -1
EXPERT_ROLES = ("unique_a", "unique_b", "synergy", "redundancy")

CKPT_MAGIC = b"FLNSCKPT"
CKPT_VERSION = 1


class MaskContractError(ValueError):
    """Raised when a masking request touches CLS or an invalid position."""


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    d_raw: int = 48
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    # Wide layer-norm floor keeps the score smooth along the zero-baseline
    # interpolation path used by integrated gradients.
    ln_eps: float = 0.1
    tau: float = 1.0
    n_labels: int = 3
    flavor: str = "moe"
    seed: int = 0
    vocab_a: int = 64
    vocab_b: int = 64

    def __post_init__(self):
        if self.flavor not in ("moe", "dense", "pooled"):
            raise ValueError(f"unknown flavor {self.flavor!r}")
        if self.d % self.heads != 0:
            raise ValueError("hidden size must divide evenly over heads")
        if self.tau <= 0:
            raise ValueError("gate temperature must be positive")
        if self.ln_eps <= 0:
            raise ValueError("ln_eps must be positive")


class EncoderBank:
    """Frozen embedding tables and output projections, one per modality."""

    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xE0C)))
        self.cfg = cfg
        sa = 1.0 / np.sqrt(cfg.d_raw)
        self.params = {
            "enc.embed_a": rng.normal(0, 1, (cfg.vocab_a, cfg.d_raw)),
            "enc.embed_b": rng.normal(0, 1, (cfg.vocab_b, cfg.d_raw)),
            "enc.proj_a": rng.normal(0, sa, (cfg.d_raw, cfg.d)),
            "enc.proj_b": rng.normal(0, sa, (cfg.d_raw, cfg.d)),
            "enc.cls": rng.normal(0, 1.0 / np.sqrt(cfg.d), (cfg.d,)),
        }

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def encode_modality(self, tokens: np.ndarray, modality: str) -> np.ndarray:
        table = self.params[f"enc.embed_{modality}"]
        proj = self.params[f"enc.proj_{modality}"]
        if tokens.min() < 0 or tokens.max() >= table.shape[0]:
            raise ValueError(
                f"token id out of range for modality {modality} "
                f"(vocab {table.shape[0]})"
            )
        return table[tokens] @ proj


@dataclass
class JointSequence:
    """CLS-prefixed concatenation of modality feature blocks."""

    features: np.ndarray          # (B, T', d)
    segments: np.ndarray          # (T',) ints; -1 for CLS, else modality index
    valid: np.ndarray             # (B, T') bool; CLS always True
    labels: np.ndarray | None = None   # (B, n_labels)

    @property
    def n_positions(self) -> int:
        return self.features.shape[1]

    def modality_positions(self, modality: int) -> np.ndarray:
        return np.flatnonzero(self.segments == modality)

    def select(self, idx) -> "JointSequence":
        idx = np.atleast_1d(np.asarray(idx))
        return JointSequence(
            self.features[idx], self.segments,
            self.valid[idx],
            None if self.labels is None else self.labels[idx],
        )

    def mask_features(self, positions) -> "JointSequence":
        """Zero the listed feature vectors; everything else is untouched.

        ``positions`` is either a flat iterable of positions (applied to
        every sample) or a per-sample list of iterables.
        """
        batch = self.features.shape[0]
        if len(positions) == batch and all(
            isinstance(p, (list, tuple, set, frozenset, np.ndarray)) for p in positions
        ):
            per_sample = [sorted(int(q) for q in p) for p in positions]
        else:
            flat = sorted(int(q) for q in positions)
            per_sample = [flat] * batch
        out = self.features.copy()
        for b, pos in enumerate(per_sample):
            for p in pos:
                if p == 0:
                    raise MaskContractError("CLS position cannot be masked")
                if p < 0 or p >= self.n_positions:
                    raise MaskContractError(f"position {p} out of range")
                if not self.valid[b, p]:
                    raise MaskContractError(f"position {p} is padding in sample {b}")
            if pos:
                out[b, pos, :] = 0.0
        return JointSequence(out, self.segments, self.valid.copy(),
                             None if self.labels is None else self.labels.copy())


@dataclass
class ExpertBundle:
    """One forward pass: per-expert logits, gate weights, mixture, attention."""

    expert_names: list[str]
    expert_logits: dict[str, Tensor]
    gate_weights: Tensor | None
    mixture: Tensor | None
    attention: dict[str, np.ndarray] = field(default_factory=dict)  # (L,B,h,T',T')
    features: Tensor | None = None

    def logits_array(self) -> np.ndarray:
        return self.mixture.data


def samples_to_arrays(samples: list[Sample]):
    tok_a = np.array([s.tokens_a for s in samples], dtype=np.int64)
    tok_b = np.array([s.tokens_b for s in samples], dtype=np.int64)
    labels = np.array([s.labels for s in samples], dtype=np.float64)
    return tok_a, tok_b, labels


def _init_linear(rng, fan_in, fan_out):
    return rng.normal(0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out))


class FusionModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.encoders = EncoderBank(cfg)
        self.expert_names = ["dense"] if cfg.flavor == "dense" else list(EXPERT_ROLES)
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xF0D)))
        self.params: dict[str, Tensor] = {}
        for name in self.expert_names:
            self._init_expert(rng, name)
        if cfg.flavor != "dense":
            d = cfg.d
            self._add(rng, "gate.w1", (2 * d, d))
            self._add_zeros("gate.b1", (d,))
            self._add(rng, "gate.w2", (d, len(self.expert_names)))
            self._add_zeros("gate.b2", (len(self.expert_names),))

    # -- parameters -------------------------------------------------------

    def _add(self, rng, name, shape):
        self.params[name] = Tensor(_init_linear(rng, shape[0], shape[1]),
                                   requires_grad=True)

    def _add_zeros(self, name, shape):
        self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def _init_expert(self, rng, name):
        d, cfg = self.cfg.d, self.cfg
        hidden = d * cfg.mlp_ratio
        for layer in range(cfg.layers):
            p = f"{name}.l{layer}"
            for proj in ("wq", "wk", "wv", "wo"):
                self._add(rng, f"{p}.{proj}", (d, d))
                self._add_zeros(f"{p}.{proj}_b", (d,))
            self.params[f"{p}.ln1_g"] = Tensor(np.ones(d), requires_grad=True)
            self._add_zeros(f"{p}.ln1_b", (d,))
            self.params[f"{p}.ln2_g"] = Tensor(np.ones(d), requires_grad=True)
            self._add_zeros(f"{p}.ln2_b", (d,))
            self._add(rng, f"{p}.mlp_w1", (d, hidden))
            self._add_zeros(f"{p}.mlp_b1", (hidden,))
            self._add(rng, f"{p}.mlp_w2", (hidden, d))
            self._add_zeros(f"{p}.mlp_b2", (d,))
        self.params[f"{name}.lnf_g"] = Tensor(np.ones(d), requires_grad=True)
        self._add_zeros(f"{name}.lnf_b", (d,))
        self._add(rng, f"{name}.head_w", (d, cfg.n_labels))
        self._add_zeros(f"{name}.head_b", (cfg.n_labels,))

    def trainable_params(self) -> dict[str, Tensor]:
        return self.params

    def all_param_arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.encoders.params)
        out.update({k: v.data for k, v in self.params.items()})
        return out

    # -- encoding ----------------------------------------------------------

    def encode(self, tok_a: np.ndarray, tok_b: np.ndarray,
               labels: np.ndarray | None = None,
               valid_a: np.ndarray | None = None,
               valid_b: np.ndarray | None = None) -> JointSequence:
        """Embed, project, prepend CLS, concatenate modality blocks (A then B)."""
        feat_a = self.encoders.encode_modality(tok_a, "a")
        feat_b = self.encoders.encode_modality(tok_b, "b")
        batch = tok_a.shape[0]
        if valid_a is None:
            valid_a = np.ones(tok_a.shape, dtype=bool)
        if valid_b is None:
            valid_b = np.ones(tok_b.shape, dtype=bool)
        feat_a = feat_a * valid_a[:, :, None]
        feat_b = feat_b * valid_b[:, :, None]

        if self.cfg.flavor == "pooled":
            cnt_a = np.maximum(valid_a.sum(axis=1, keepdims=True), 1)
            cnt_b = np.maximum(valid_b.sum(axis=1, keepdims=True), 1)
            feat_a = (feat_a.sum(axis=1) / cnt_a)[:, None, :]
            feat_b = (feat_b.sum(axis=1) / cnt_b)[:, None, :]
            valid_a = np.ones((batch, 1), dtype=bool)
            valid_b = np.ones((batch, 1), dtype=bool)

        cls = np.broadcast_to(self.encoders.params["enc.cls"],
                              (batch, 1, self.cfg.d))
        features = np.concatenate([cls, feat_a, feat_b], axis=1)
        segments = np.concatenate([
            [CLS_SEGMENT],
            np.zeros(feat_a.shape[1], dtype=np.int64),
            np.ones(feat_b.shape[1], dtype=np.int64),
        ])
        valid = np.concatenate([np.ones((batch, 1), dtype=bool), valid_a, valid_b],
                               axis=1)
        return JointSequence(features, segments, valid, labels)

    def encode_samples(self, samples: list[Sample]) -> JointSequence:
        tok_a, tok_b, labels = samples_to_arrays(samples)
        return self.encode(tok_a, tok_b, labels)

    # -- forward -----------------------------------------------------------

    def _key_allowed(self, expert: str, segments: np.ndarray) -> np.ndarray:
        if expert == "unique_a":
            return (segments == CLS_SEGMENT) | (segments == 0)
        if expert == "unique_b":
            return (segments == CLS_SEGMENT) | (segments == 1)
        return np.ones_like(segments, dtype=bool)

    def _expert_forward(self, name: str, x: Tensor, attn_mask: np.ndarray,
                        record: bool):
        cfg = self.cfg
        d, heads = cfg.d, cfg.heads
        dh = d // heads
        batch, tlen = x.shape[0], x.shape[1]
        stacks = []
        for layer in range(cfg.layers):
            p = f"{name}.l{layer}"
            h = layer_norm(x, self.params[f"{p}.ln1_g"], self.params[f"{p}.ln1_b"],
                           eps=cfg.ln_eps)

            def split_heads(t):
                return t.reshape(batch, tlen, heads, dh).transpose(0, 2, 1, 3)

            q = split_heads(linear(h, self.params[f"{p}.wq"], self.params[f"{p}.wq_b"]))
            k = split_heads(linear(h, self.params[f"{p}.wk"], self.params[f"{p}.wk_b"]))
            v = split_heads(linear(h, self.params[f"{p}.wv"], self.params[f"{p}.wv_b"]))
            probs = attention_probs(q, k, attn_mask, 1.0 / np.sqrt(dh))
            if record:
                stacks.append(probs.data.copy())
            ctx = matmul(probs, v).transpose(0, 2, 1, 3).reshape(batch, tlen, d)
            x = x + linear(ctx, self.params[f"{p}.wo"], self.params[f"{p}.wo_b"])
            h2 = layer_norm(x, self.params[f"{p}.ln2_g"], self.params[f"{p}.ln2_b"],
                            eps=cfg.ln_eps)
            mid = gelu(linear(h2, self.params[f"{p}.mlp_w1"], self.params[f"{p}.mlp_b1"]))
            x = x + linear(mid, self.params[f"{p}.mlp_w2"], self.params[f"{p}.mlp_b2"])
        x = layer_norm(x, self.params[f"{name}.lnf_g"], self.params[f"{name}.lnf_b"],
                       eps=cfg.ln_eps)
        cls_out = x[:, 0, :]
        logits = linear(cls_out, self.params[f"{name}.head_w"], self.params[f"{name}.head_b"])
        stack = np.stack(stacks) if record else None
        return logits, stack

    def _gate(self, features: Tensor, seq: JointSequence) -> Tensor:
        pooled = []
        for m in (0, 1):
            sel = seq.segments == m
            w = (seq.valid & sel[None, :]).astype(np.float64)
            cnt = np.maximum(w.sum(axis=1, keepdims=True), 1.0)
            pooled.append((features * Tensor(w[:, :, None])).sum(axis=1) * Tensor(1.0 / cnt))
        g = concat(pooled, axis=-1)
        g = gelu(linear(g, self.params["gate.w1"], self.params["gate.b1"]))
        logits = linear(g, self.params["gate.w2"], self.params["gate.b2"])
        logits = logits * (1.0 / self.cfg.tau)
        return softmax_rows(logits, np.ones(logits.shape, dtype=bool))

    def forward(self, seq: JointSequence, record_attention: bool = False,
                only_expert: str | None = None,
                experts: list[str] | None = None,
                features: Tensor | None = None) -> ExpertBundle:
        """Run experts and gate over a joint sequence.

        ``only_expert``/``experts`` restrict the pass to a subset of experts
        (no gate, no mixture).  ``features`` lets the caller supply the
        joint features as a graph leaf (e.g. with ``requires_grad=True``
        for attribution); it must match ``seq.features``.
        """
        if features is None:
            features = Tensor(seq.features)
        if only_expert:
            experts = [only_expert]
        names = experts if experts else self.expert_names
        logits: dict[str, Tensor] = {}
        attention: dict[str, np.ndarray] = {}
        for name in names:
            allowed = self._key_allowed(name, seq.segments)
            key_mask = seq.valid & allowed[None, :]          # (B, T')
            attn_mask = key_mask[:, None, None, :]           # (B, 1, 1, T')
            out, stack = self._expert_forward(name, features, attn_mask,
                                              record_attention)
            logits[name] = out
            if record_attention:
                attention[name] = stack
        if experts:
            return ExpertBundle(names, logits, None, None, attention, features)

        if self.cfg.flavor == "dense":
            weights = None
            mixture = logits["dense"]
        else:
            weights = self._gate(features, seq)
            mixture = None
            for i, name in enumerate(self.expert_names):
                contrib = weights[:, i : i + 1] * logits[name]
                mixture = contrib if mixture is None else mixture + contrib
        return ExpertBundle(list(self.expert_names), logits, weights, mixture,
                            attention, features)

    def predict(self, seq: JointSequence, batch_size: int = 256) -> np.ndarray:
        """Mixture logits for a full dataset, evaluated in chunks."""
        chunks = []
        n = seq.features.shape[0]
        for lo in range(0, n, batch_size):
            sub = JointSequence(seq.features[lo:lo + batch_size], seq.segments,
                                seq.valid[lo:lo + batch_size])
            chunks.append(self.forward(sub).mixture.data)
        return np.concatenate(chunks, axis=0)


# -- checkpoint i/o ----------------------------------------------------------


def save_checkpoint(model: FusionModel, path) -> None:
    cfg_blob = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    arrays = model.all_param_arrays()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> FusionModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        cfg = ModelConfig(**json.loads(fh.read(cfg_len)))
        model = FusionModel(cfg)
        (n_params,) = struct.unpack("<I", fh.read(4))
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            arr = np.frombuffer(fh.read(8 * int(np.prod(shape, dtype=np.int64))),
                                dtype=np.float64).reshape(shape).copy()
            if name.startswith("enc."):
                model.encoders.params[name] = arr
            elif name in model.params:
                model.params[name].data = arr
            else:
                raise ValueError(f"unknown parameter {name!r} in checkpoint")
    return model
