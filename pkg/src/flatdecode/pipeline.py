"""One-layer decode step wired through the dispatched GEMMs and the decode
attention kernels, verified end to end against an all-oracle pipeline.

Model presets carry only the four projection/FFN GEMM shapes and the head
geometry; weights and the KV cache are seeded random. ``--scale`` shrinks
every dimension proportionally so the same shape regimes appear at desk size.
"""

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig, AttnStats, attention_reference, batch_decode_attention
from .dispatch import DispatchTable, dispatch, run_kernel
from .matrix import gemm_oracle
from .metrics import rel_error_rowwise
from .softmax import ScalingCalibration
from .timing import measure, median_mad

GEMM_TOLERANCE = 1e-4


@dataclass(frozen=True)
class LayerConfig:
    name: str
    d: int
    ffn_dim: int
    n_heads: int

    def __post_init__(self):
        if min(self.d, self.ffn_dim, self.n_heads) < 1:
            raise ValueError(f"dims must be >= 1: {self}")
        if self.d % self.n_heads:
            raise ValueError(f"hidden dim {self.d} not divisible by {self.n_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    def gemm_shapes(self):
        """The four [N, K] shapes of one layer: fused KQV, O, FFN1, FFN2."""
        return {
            "kqv": (3 * self.d, self.d),
            "o_proj": (self.d, self.d),
            "ffn1": (self.ffn_dim, self.d),
            "ffn2": (self.d, self.ffn_dim),
        }


PRESETS = {
    "llama2-7b": LayerConfig(name="llama2-7b", d=4096, ffn_dim=11008, n_heads=32),
    "chatglm2-6b-shape": LayerConfig(name="chatglm2-6b-shape", d=4096, ffn_dim=13696, n_heads=32),
}


def get_preset(name: str, scale: int = 1) -> LayerConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown model preset {name!r}; have {sorted(PRESETS)}")
    cfg = PRESETS[name]
    if scale == 1:
        return cfg
    if scale < 1 or cfg.d % scale or cfg.ffn_dim % scale:
        raise ValueError(f"scale {scale} does not divide {cfg.name} dims")
    heads = max(1, cfg.n_heads // scale)
    return LayerConfig(name=f"{cfg.name}/{scale}", d=cfg.d // scale,
                       ffn_dim=cfg.ffn_dim // scale, n_heads=heads)


def layer_weights(cfg: LayerConfig, rng) -> dict:
    shapes = cfg.gemm_shapes()
    return {op: rng.standard_normal((k, n), dtype=np.float32) / math.sqrt(k)
            for op, (n, k) in shapes.items()}


@dataclass
class DecodeResult:
    output: np.ndarray
    oracle: np.ndarray
    max_err: float
    gemm_errors: dict
    choices: dict
    attn_stats: AttnStats
    timings: dict
    passed: bool


def decode_layer(cfg: LayerConfig, batch: int, seq_len: int,
                 calib: ScalingCalibration, table: DispatchTable, mode: str,
                 seed: int = 0, split: int = None, time_reps: int = 0) -> DecodeResult:
    """Run one decode step: KQV projection, per-head attention over a random
    KV cache, O projection, FFN1, FFN2. Each GEMM goes through the dispatch
    table; the whole layer is checked against the oracle pipeline."""
    rng = np.random.default_rng(seed)
    weights = layer_weights(cfg, rng)
    x = rng.standard_normal((batch, cfg.d), dtype=np.float32)
    hd = cfg.head_dim
    k_cache = rng.standard_normal((cfg.n_heads, seq_len, hd), dtype=np.float32)
    v_cache = rng.standard_normal((cfg.n_heads, seq_len, hd), dtype=np.float32)
    if split is None:
        split = min(4, seq_len)
    attn_cfg = AttentionConfig(p=split, scale=1.0 / math.sqrt(hd), calib=calib)

    choices = {}
    timings = {}
    gemm_errors = {}
    attn_stats = AttnStats()

    def gemm(op, act):
        n, k = cfg.gemm_shapes()[op]
        choice = dispatch(act.shape[0], n, k, table)
        choices[op] = choice
        out = run_kernel(choice, act, weights[op])
        if time_reps:
            timings[op] = median_mad(measure(lambda: run_kernel(choice, act, weights[op]),
                                              reps=time_reps, warmup=1))
        ref = gemm_oracle(act, weights[op])
        gemm_errors[op] = rel_error_rowwise(out, ref)
        return out

    def attend(q):
        out = np.empty_like(q)
        for h in range(cfg.n_heads):
            lo = h * hd
            o_h, st = batch_decode_attention(q[:, lo:lo + hd], k_cache[h], v_cache[h],
                                             attn_cfg, mode)
            out[:, lo:lo + hd] = o_h
            attn_stats.rows_recomputed += st.rows_recomputed
            attn_stats.rescale_ops += st.rescale_ops
            attn_stats.max_ops += st.max_ops
        if time_reps:
            timings["attention"] = median_mad(measure(
                lambda: batch_decode_attention(q[:, :hd], k_cache[0], v_cache[0],
                                               attn_cfg, mode), reps=time_reps, warmup=1))
        return out

    kqv = gemm("kqv", x)
    q = kqv[:, :cfg.d]
    attn_out = attend(q)
    o = gemm("o_proj", attn_out)
    h1 = gemm("ffn1", o)
    out = gemm("ffn2", h1)

    oracle = _oracle_layer(cfg, weights, x, k_cache, v_cache, attn_cfg.scale)
    max_err = rel_error_rowwise(out, oracle)
    passed = max_err <= GEMM_TOLERANCE and all(e <= GEMM_TOLERANCE for e in gemm_errors.values())
    return DecodeResult(output=out, oracle=oracle, max_err=max_err,
                        gemm_errors=gemm_errors, choices=choices,
                        attn_stats=attn_stats, timings=timings, passed=passed)


def _oracle_layer(cfg, weights, x, k_cache, v_cache, scale):
    hd = cfg.head_dim
    kqv = gemm_oracle(x, weights["kqv"])
    q = kqv[:, :cfg.d]
    attn = np.empty_like(q)
    for h in range(cfg.n_heads):
        lo = h * hd
        attn[:, lo:lo + hd] = attention_reference(q[:, lo:lo + hd], k_cache[h],
                                                  v_cache[h], scale)
    o = gemm_oracle(attn, weights["o_proj"])
    h1 = gemm_oracle(o, weights["ffn1"])
    return gemm_oracle(h1, weights["ffn2"])


# --- line-oriented report records: space-separated key=value pairs ------------

def format_record(fields: dict) -> str:
    parts = []
    for key, val in fields.items():
        sval = str(val)
        if any(c.isspace() or c == "=" for c in sval):
            raise ValueError(f"record value may not contain spaces or '=': {key}={sval!r}")
        parts.append(f"{key}={sval}")
    return " ".join(parts)


def parse_record(line: str) -> dict:
    fields = {}
    for part in line.split():
        key, sep, val = part.partition("=")
        if not sep or not key:
            raise ValueError(f"malformed record field {part!r}")
        fields[key] = val
    return fields


def _is_record_line(line: str) -> bool:
    toks = line.split()
    return bool(toks) and all("=" in t and not t.startswith("=") for t in toks)


def parse_records(text: str):
    """Extract record lines from mixed output: a record line is one whose
    every token is a key=value pair; anything else is ignored."""
    return [parse_record(line) for line in text.splitlines()
            if not line.startswith("#") and _is_record_line(line.strip())]
