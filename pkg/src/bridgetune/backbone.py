"""Toy frozen transformer encoder: embedding, pre-LN residual layers, a tied
masked-position prediction head, and per-layer hidden trace extraction.

States flow as d x N column matrices (one column per position). The trace
records, for layers 0..L, the state at the output position and the mean over
all positions present at that layer.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .snapshot import load_snapshot, save_snapshot

MASK_ID = 0


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_dim: int = 32
    num_heads: int = 2
    vocab_size: int = 64
    max_seq_len: int = 32
    ffn_dim: int = 256

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")


@dataclass
class HiddenTrace:
    """h_out[i]: d x 1 state at the output position after layer i;
    h_ctx[i]: d x 1 mean over positions. Exactly L+1 entries each, the
    input layer included."""

    h_out: list
    h_ctx: list


@dataclass
class BackboneState:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def _layer_names(i: int):
    p = f"layer{i}."
    return {
        "wq": p + "attn.wq", "bq": p + "attn.bq",
        "wk": p + "attn.wk", "bk": p + "attn.bk",
        "wv": p + "attn.wv", "bv": p + "attn.bv",
        "wo": p + "attn.wo", "bo": p + "attn.bo",
        "ln1_gain": p + "ln1.gain", "ln1_bias": p + "ln1.bias",
        "w1": p + "ffn.w1", "b1": p + "ffn.b1",
        "w2": p + "ffn.w2", "b2": p + "ffn.b2",
        "ln2_gain": p + "ln2.gain", "ln2_bias": p + "ln2.bias",
    }


def bias_names(config: ModelConfig):
    """Every bias tensor name: linear biases plus layer-norm biases."""
    names = []
    for i in range(config.num_layers):
        n = _layer_names(i)
        names.extend([n["bq"], n["bk"], n["bv"], n["bo"],
                      n["b1"], n["b2"], n["ln1_bias"], n["ln2_bias"]])
    return names


def init_backbone(config: ModelConfig, rng: np.random.Generator,
                  requires_grad: bool = True) -> BackboneState:
    d, dff = config.hidden_dim, config.ffn_dim

    def w(shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=requires_grad)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=requires_grad)

    tensors = {
        "embed": w((config.vocab_size, d)),
        "pos": w((config.max_seq_len, d)),
    }
    for i in range(config.num_layers):
        n = _layer_names(i)
        for key in ("wq", "wk", "wv", "wo"):
            tensors[n[key]] = w((d, d))
        for key in ("bq", "bk", "bv", "bo"):
            tensors[n[key]] = zeros((d, 1))
        tensors[n["w1"]] = w((dff, d))
        tensors[n["b1"]] = zeros((dff, 1))
        tensors[n["w2"]] = w((d, dff))
        tensors[n["b2"]] = zeros((d, 1))
        tensors[n["ln1_gain"]] = ones((d, 1))
        tensors[n["ln1_bias"]] = zeros((d, 1))
        tensors[n["ln2_gain"]] = ones((d, 1))
        tensors[n["ln2_bias"]] = zeros((d, 1))
    return BackboneState(config=config, tensors=tensors)


def freeze(state: BackboneState) -> BackboneState:
    for t in state.tensors.values():
        t.requires_grad = False
    return state


def param_count(state: BackboneState) -> int:
    return sum(t.data.size for t in state.tensors.values())


def checksum(state: BackboneState) -> str:
    h = hashlib.sha256()
    for name in sorted(state.tensors):
        h.update(name.encode())
        h.update(state.tensors[name].data.tobytes())
    return h.hexdigest()


def embed(state: BackboneState, tokens) -> Tensor:
    """Token embedding plus positional embedding, as a d x N matrix."""
    cfg = state.config
    tokens = list(tokens)
    if any(t < 0 or t >= cfg.vocab_size for t in tokens):
        raise ValueError(f"token id outside vocabulary of {cfg.vocab_size}")
    if len(tokens) > cfg.max_seq_len:
        raise ValueError(f"sequence length {len(tokens)} exceeds {cfg.max_seq_len}")
    tok = ad.gather_rows(state["embed"], tokens)
    pos = ad.gather_rows(state["pos"], list(range(len(tokens))))
    return ad.transpose(ad.add(tok, pos))


def _column(h: Tensor, j: int) -> Tensor:
    return ad.transpose(ad.gather_rows(ad.transpose(h), [j]))


def _ln_affine(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.elementwise_mul(gain, ad.layer_norm(x, axis=0)), bias)


def _attention(state: BackboneState, i: int, x: Tensor, pet) -> Tensor:
    cfg = state.config
    n = _layer_names(i)
    hd = cfg.hidden_dim // cfg.num_heads

    def proj(wname, bname, which):
        bias = state[n[bname]]
        if pet is not None:
            bias = pet.bias(n[bname], bias)
        out = ad.add(ad.matmul(state[n[wname]], x), bias)
        if pet is not None and which is not None:
            delta = pet.qv_delta(i, which, x)
            if delta is not None:
                out = ad.add(out, delta)
        return out

    q = proj("wq", "bq", "q")
    k = proj("wk", "bk", None)
    v = proj("wv", "bv", "v")

    heads = []
    scale = 1.0 / np.sqrt(hd)
    for j in range(cfg.num_heads):
        qh = ad.slice_rows(q, j * hd, (j + 1) * hd)
        kh = ad.slice_rows(k, j * hd, (j + 1) * hd)
        vh = ad.slice_rows(v, j * hd, (j + 1) * hd)
        scores = ad.scalar_mul(ad.matmul(ad.transpose(qh), kh), scale)
        weights = ad.softmax(scores, axis=-1)
        heads.append(ad.transpose(ad.matmul(weights, ad.transpose(vh))))
    merged = ad.concat(heads, axis=0) if len(heads) > 1 else heads[0]

    bo = state[n["bo"]]
    if pet is not None:
        bo = pet.bias(n["bo"], bo)
    return ad.add(ad.matmul(state[n["wo"]], merged), bo)


def _ffn(state: BackboneState, i: int, x: Tensor, pet) -> Tensor:
    n = _layer_names(i)
    b1, b2 = state[n["b1"]], state[n["b2"]]
    if pet is not None:
        b1 = pet.bias(n["b1"], b1)
        b2 = pet.bias(n["b2"], b2)
    hidden = ad.gelu(ad.add(ad.matmul(state[n["w1"]], x), b1))
    return ad.add(ad.matmul(state[n["w2"]], hidden), b2)


def forward(state: BackboneState, tokens, mask_position: int, pet=None):
    """Run the encoder; returns (logits at the mask position, HiddenTrace).

    pet, when given, is consulted at the attachment hooks: input extension,
    query/value low-rank deltas, bias replacement, and sublayer adaptation.
    """
    cfg = state.config
    h = embed(state, tokens)
    if pet is not None:
        h = pet.attach_input(h, cfg.max_seq_len)
    n_positions = h.data.shape[1]
    if not 0 <= mask_position < n_positions:
        raise ValueError(f"mask position {mask_position} outside {n_positions} positions")

    h_out = [_column(h, mask_position)]
    h_ctx = [ad.mean_over_axis(h, axis=1)]
    for i in range(cfg.num_layers):
        names = _layer_names(i)
        g1, b1 = state[names["ln1_gain"]], state[names["ln1_bias"]]
        g2, b2 = state[names["ln2_gain"]], state[names["ln2_bias"]]
        if pet is not None:
            b1 = pet.bias(names["ln1_bias"], b1)
            b2 = pet.bias(names["ln2_bias"], b2)
        attn = _attention(state, i, _ln_affine(h, g1, b1), pet)
        if pet is not None:
            attn = pet.adapt(i, "attn", attn)
        h = ad.add(h, attn)
        ff = _ffn(state, i, _ln_affine(h, g2, b2), pet)
        if pet is not None:
            ff = pet.adapt(i, "ffn", ff)
        h = ad.add(h, ff)
        h_out.append(_column(h, mask_position))
        h_ctx.append(ad.mean_over_axis(h, axis=1))

    logits = ad.matmul(state["embed"], h_out[-1])
    return logits, HiddenTrace(h_out=h_out, h_ctx=h_ctx)


@dataclass(frozen=True)
class PretrainConfig:
    learning_rate: float = 5e-3
    batch_size: int = 8
    max_steps: int = 2500
    seed: int = 0
    grad_clip: float = 1.0


def mlm_samples(corpus, rng: np.random.Generator):
    """Mask one random position per sequence: (masked tokens, target, position)."""
    out = []
    for seq in corpus:
        pos = int(rng.integers(0, len(seq)))
        masked = list(seq)
        target = masked[pos]
        masked[pos] = MASK_ID
        out.append((masked, target, pos))
    return out


def pretrain_mlm(config: ModelConfig, corpus, hyper: PretrainConfig) -> BackboneState:
    """Masked-token training of all backbone weights on the corpus; the
    caller freezes the result. Zero steps returns the random init."""
    if not corpus:
        raise ValueError("corpus is empty")
    rng = np.random.default_rng(hyper.seed)
    state = init_backbone(config, rng, requires_grad=True)
    if hyper.max_steps == 0:
        return state
    params = list(state.tensors.values())
    adam = ad.AdamState(params, hyper.learning_rate)
    corpus = list(corpus)
    for _ in range(hyper.max_steps):
        idx = rng.integers(0, len(corpus), size=hyper.batch_size)
        losses = []
        for j in idx:
            seq = corpus[j]
            pos = int(rng.integers(0, len(seq)))
            masked = list(seq)
            target = masked[pos]
            masked[pos] = MASK_ID
            logits, _ = forward(state, masked, pos)
            losses.append(ad.cross_entropy_with_logits(logits, target))
        loss = losses[0]
        for extra in losses[1:]:
            loss = ad.add(loss, extra)
        loss = ad.scalar_mul(loss, 1.0 / len(losses))
        grads = ad.backward(loss)
        ad.clip_gradients(params, grads, hyper.grad_clip)
        ad.adam_step(params, grads, adam)
    return state


def masked_accuracy(state: BackboneState, samples) -> float:
    """Unrestricted argmax accuracy on (masked tokens, target, position) samples."""
    hits = 0
    with ad.no_grad():
        for tokens, target, pos in samples:
            logits, _ = forward(state, tokens, pos)
            hits += int(np.argmax(logits.data) == target)
    return hits / len(samples)


def save_backbone(path, state: BackboneState) -> None:
    from dataclasses import asdict
    header = {"kind": "backbone", "config": asdict(state.config)}
    save_snapshot(path, header, {k: t.data for k, t in state.tensors.items()})


def load_backbone(path) -> BackboneState:
    header, tensors = load_snapshot(path)
    if header.get("kind") != "backbone":
        raise ValueError(f"{path} is not a backbone snapshot")
    config = ModelConfig(**header["config"])
    state = BackboneState(config=config)
    for name, arr in tensors.items():
        state.tensors[name] = Tensor(arr, requires_grad=False)
    return state
