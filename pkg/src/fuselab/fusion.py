"""Fusion strategies and visual-layer selection.

Covers the full strategy grid: fusion position (external = before the LM
input, internal = inside LM layers) crossed with fusion pattern (modular =
new cross-attention modules, direct = parameter-light arithmetic), plus the
two layer-selection criteria (similarity-based stage partitioning and
proportional splits) and exact parameter accounting for every plan.

External fusion owns a single shared projector regardless of how many layers
it fuses; internal fusion owns one projector per fused layer, which is what
makes it the parameter-heavy option.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .encoder import EncoderConfig, VisualFeatureSet
from .errors import ConfigError, DimensionError, NumericError
from .layers import LayerNorm, Linear, Mlp
from .rng import Rng

LAYER_SET_LABELS = ("Single", "Double", "Triple", "Former", "Latter", "All", "Custom")
INTERNAL_MODULAR_VARIANTS = ("pre-cross", "post-cross", "parallel")
EXTERNAL_DIRECT_VARIANTS = ("add", "stack-N", "stack-D", "mean-group")
PROJECTOR_KINDS = ("linear", "mlp-2layer-gelu")

# Feed-forward widening inside gated cross-attention blocks.
GATED_FF_RATIO = 4


# ---------------------------------------------------------------------------
# Layer selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSet:
    """Sorted 1-based encoder layer ids with the selection label they realize."""

    label: str
    indices: tuple[int, ...]

    def __post_init__(self):
        if self.label not in LAYER_SET_LABELS and self.label != "Baseline":
            raise ConfigError(f"unknown layer-set label '{self.label}'")
        if list(self.indices) != sorted(set(self.indices)):
            raise ConfigError(f"layer indices must be sorted and unique, got {self.indices}")

    @property
    def k(self) -> int:
        return len(self.indices)

    def to_dict(self) -> dict:
        return {"label": self.label, "indices": list(self.indices)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSet":
        return cls(label=d["label"], indices=tuple(d["indices"]))


@dataclass(frozen=True)
class StagePartition:
    """Boundaries splitting encoder depth into beginning/middle/ending stages.

    Stages are the 1-based ranges [1, b], [b+1, m], [m+1, n].
    """

    b: int
    m: int
    n: int

    def __post_init__(self):
        if not (1 <= self.b < self.m < self.n):
            raise ConfigError(f"invalid stage boundaries B={self.b}, M={self.m}, N={self.n}")

    def stage_of(self, layer: int) -> int:
        if layer <= self.b:
            return 0
        return 1 if layer <= self.m else 2

    def stages(self) -> list[list[int]]:
        return [list(range(1, self.b + 1)),
                list(range(self.b + 1, self.m + 1)),
                list(range(self.m + 1, self.n + 1))]


def ending_layer(depth: int) -> int:
    """The layer whose tokens feed the LM input: penultimate, depth - 1."""
    return depth - 1


def _default_representatives(depth: int) -> tuple[int, int, int]:
    # Proportional mapping of the reference picks {3, 18, 23} at depth 24;
    # the ending representative is always the penultimate layer.
    beginning = max(1, round(3 * depth / 24))
    middle = max(beginning + 1, round(18 * depth / 24))
    return beginning, middle, ending_layer(depth)


def _partition_representatives(partition: StagePartition) -> tuple[int, int, int]:
    # Midpoint of each stage; ending stage pinned to the penultimate layer.
    beginning = (1 + partition.b) // 2
    middle = (partition.b + 1 + partition.m) // 2
    end = max(partition.m + 1, ending_layer(partition.n))
    return beginning, middle, end


def resolve_layer_set(label: str, depth: int, partition: StagePartition | None = None,
                      override=None) -> LayerSet:
    """Resolve a selection label into concrete encoder layers.

    Explicit ``override`` indices win; otherwise Single/Double/Triple come
    from stage representatives (from ``partition`` when given, else the
    proportional defaults) and Former/Latter/All are proportional ranges.
    """
    if depth < 4:
        raise ConfigError(f"layer selection requires depth >= 4, got {depth}")
    if override is not None:
        indices = tuple(sorted(set(int(i) for i in override)))
        for i in indices:
            if not (1 <= i <= depth):
                raise ConfigError(f"layer override {i} outside [1, {depth}]")
        return LayerSet(label=label, indices=indices)

    if partition is not None and partition.n != depth:
        raise ConfigError(f"partition depth {partition.n} != encoder depth {depth}")
    reps = (_partition_representatives(partition) if partition is not None
            else _default_representatives(depth))
    beginning, middle, end = reps

    if label == "Single":
        indices: tuple[int, ...] = (middle,)
    elif label == "Double":
        indices = tuple(sorted({beginning, middle}))
    elif label == "Triple":
        indices = tuple(sorted({beginning, middle, end}))
    elif label == "Former":
        indices = tuple(range(1, depth // 2 + 1))
    elif label == "Latter":
        indices = tuple(range(depth // 2 + 1, depth + 1))
    elif label == "All":
        indices = tuple(range(1, depth + 1))
    elif label == "Custom":
        raise ConfigError("Custom layer set requires explicit override indices")
    else:
        raise ConfigError(f"unknown layer-set label '{label}'")
    return LayerSet(label=label, indices=indices)


# ---------------------------------------------------------------------------
# Similarity-based partitioning
# ---------------------------------------------------------------------------


def layer_similarity_matrix(feature_sets: list[VisualFeatureSet]) -> np.ndarray:
    """Mean cosine similarity between token-pooled layer features.

    Entry (i, j) averages, over probe images, the cosine similarity of the
    token-mean-pooled features of layers i+1 and j+1. Exactly symmetric with
    unit diagonal.
    """
    if not feature_sets:
        raise ConfigError("similarity matrix needs at least one probe image")
    depth = feature_sets[0].depth
    pooled = []
    for fs in feature_sets:
        if fs.depth != depth:
            raise DimensionError("probe feature sets disagree on encoder depth")
        vecs = np.stack([f.data.mean(axis=0) for f in fs.per_layer])
        norms = np.linalg.norm(vecs, axis=1)
        for li, nrm in enumerate(norms, start=1):
            if nrm == 0.0:
                raise NumericError(f"zero-norm pooled feature at layer {li}")
        pooled.append(vecs / norms[:, None])

    s = np.zeros((depth, depth))
    for vecs in pooled:
        s += vecs @ vecs.T
    s /= len(pooled)
    s = (s + s.T) / 2.0
    np.fill_diagonal(s, 1.0)
    return s


def partition_score(s: np.ndarray, b: int, m: int) -> float:
    """Mean within-stage pair similarity minus mean cross-stage similarity."""
    n = s.shape[0]
    labels = np.zeros(n, dtype=int)
    labels[b:m] = 1
    labels[m:] = 2
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    vals = s[iu, ju]
    within = vals[same]
    cross = vals[~same]
    return float(within.mean() - cross.mean())


def partition_by_similarity(s: np.ndarray) -> StagePartition:
    """Exhaustive search over all (B, M) boundaries maximizing the score.

    Ties break toward the smallest B, then the smallest M.
    """
    n = s.shape[0]
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"similarity matrix must be square, got {s.shape}")
    if n < 4:
        raise ConfigError(f"partitioning requires N >= 4 layers, got {n}")
    if not np.allclose(s, s.T, atol=1e-9):
        raise DimensionError("similarity matrix must be symmetric")

    best: tuple[int, int] | None = None
    best_score = -np.inf
    for b in range(1, n - 1):
        for m in range(b + 1, n):
            score = partition_score(s, b, m)
            if score > best_score + 1e-15:
                best_score = score
                best = (b, m)
    assert best is not None
    return StagePartition(b=best[0], m=best[1], n=n)


# ---------------------------------------------------------------------------
# Fusion plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FusionPlan:
    """A fully resolved fusion strategy.

    position x pattern gives the four strategies; ``variant`` narrows
    internal-modular (cross-attention placement) and external-direct (the
    arithmetic used). The empty layer set is the no-fusion baseline.
    """

    position: str = "external"
    pattern: str = "direct"
    variant: str | None = None
    layer_set: LayerSet = field(default_factory=lambda: LayerSet("Baseline", ()))
    projector_kind: str = "linear"
    gate_init: float = 0.0

    def __post_init__(self):
        if self.position not in ("internal", "external"):
            raise ConfigError(f"unknown fusion position '{self.position}'")
        if self.pattern not in ("modular", "direct"):
            raise ConfigError(f"unknown fusion pattern '{self.pattern}'")
        if self.projector_kind not in PROJECTOR_KINDS:
            raise ConfigError(f"unknown projector kind '{self.projector_kind}'")
        if self.is_baseline:
            return
        if self.position == "internal" and self.pattern == "modular":
            if self.variant not in INTERNAL_MODULAR_VARIANTS:
                raise ConfigError(
                    f"internal-modular variant must be one of {INTERNAL_MODULAR_VARIANTS}, "
                    f"got '{self.variant}'")
        elif self.position == "external" and self.pattern == "direct":
            if self.variant not in EXTERNAL_DIRECT_VARIANTS:
                raise ConfigError(
                    f"external-direct variant must be one of {EXTERNAL_DIRECT_VARIANTS}, "
                    f"got '{self.variant}'")
        elif self.variant is not None:
            raise ConfigError(
                f"{self.position}-{self.pattern} fusion takes no variant, got '{self.variant}'")

    @property
    def is_baseline(self) -> bool:
        return self.layer_set.k == 0

    @property
    def strategy_label(self) -> str:
        if self.is_baseline:
            return "baseline"
        pos = "E" if self.position == "external" else "I"
        pat = "D" if self.pattern == "direct" else "M"
        return f"{pos}+{pat}"

    def describe(self) -> str:
        if self.is_baseline:
            return "baseline"
        var = f"/{self.variant}" if self.variant else ""
        return f"{self.strategy_label}{var} {self.layer_set.label}{list(self.layer_set.indices)}"

    def to_dict(self) -> dict:
        return {
            "position": self.position,
            "pattern": self.pattern,
            "variant": self.variant,
            "layer_set": self.layer_set.to_dict(),
            "projector": {"kind": self.projector_kind},
            "gate_init": self.gate_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionPlan":
        return cls(
            position=d["position"],
            pattern=d["pattern"],
            variant=d.get("variant"),
            layer_set=LayerSet.from_dict(d["layer_set"]),
            projector_kind=d.get("projector", {}).get("kind", "linear"),
            gate_init=d.get("gate_init", 0.0),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def baseline(cls, projector_kind: str = "linear") -> "FusionPlan":
        return cls(projector_kind=projector_kind)


def default_external_direct_variant(label: str) -> str:
    """Dimension concatenation for sparse sets; group averaging for ranges."""
    return "mean-group" if label in ("Former", "Latter", "All") else "stack-D"


def make_plan(position: str, pattern: str, layer_set: LayerSet,
              variant: str | None = None, projector_kind: str = "linear",
              gate_init: float = 0.0) -> FusionPlan:
    """Build a plan, filling in the default variant where one is required."""
    if variant is None:
        if position == "external" and pattern == "direct" and layer_set.k:
            variant = default_external_direct_variant(layer_set.label)
        elif position == "internal" and pattern == "modular" and layer_set.k:
            variant = "pre-cross"
    return FusionPlan(position=position, pattern=pattern, variant=variant,
                      layer_set=layer_set, projector_kind=projector_kind,
                      gate_init=gate_init)


def align_layers(indices: tuple[int, ...], enc_depth: int, lm_depth: int) -> dict[int, int]:
    """Map selected encoder layers onto LM layers.

    Equal depths give the identity on the selected set; otherwise proportional
    rounding, which must stay injective.
    """
    mapping: dict[int, int] = {}
    for i in indices:
        j = i if enc_depth == lm_depth else round(i * lm_depth / enc_depth)
        mapping[i] = min(lm_depth, max(1, j))
    targets = list(mapping.values())
    if len(set(targets)) != len(targets):
        raise ConfigError(
            f"layer alignment collides mapping encoder depth {enc_depth} onto "
            f"LM depth {lm_depth}: {mapping}")
    return mapping


def needed_layers(plan: FusionPlan, enc_depth: int) -> list[int]:
    """Encoder layers a plan actually consumes (selection plus the ending layer)."""
    layers = set(plan.layer_set.indices)
    layers.add(ending_layer(enc_depth))
    return sorted(layers)


def validate_plan(plan: FusionPlan, enc_depth: int, lm_depth: int,
                  n_patches: int | None = None, max_seq: int | None = None) -> str | None:
    """Reason string if the plan cannot run under these model shapes, else None."""
    if plan.is_baseline:
        return None
    for i in plan.layer_set.indices:
        if not (1 <= i <= enc_depth):
            return f"layer {i} outside encoder depth {enc_depth}"
    if plan.position == "internal":
        try:
            align_layers(plan.layer_set.indices, enc_depth, lm_depth)
        except ConfigError as e:
            return str(e)
    if (plan.position == "external" and plan.variant == "stack-N"
            and n_patches is not None and max_seq is not None):
        visual = (plan.layer_set.k + 1) * n_patches
        if visual + 8 > max_seq:  # leave headroom for a short prompt
            return (f"stack-N needs {visual} visual tokens "
                    f"but max sequence length is {max_seq}")
    return None


# ---------------------------------------------------------------------------
# Projectors
# ---------------------------------------------------------------------------


class Projector:
    """Learned map from encoder width into the LM embedding space."""

    def __init__(self, store: ParamStore, prefix: str, kind: str, d_in: int,
                 d_out: int, rng: Rng, zero_init: bool = False):
        if kind not in PROJECTOR_KINDS:
            raise ConfigError(f"unknown projector kind '{kind}'")
        self.kind = kind
        self.d_in = d_in
        self.d_out = d_out
        if kind == "linear":
            self.fc1 = Linear(store, f"{prefix}.fc1", d_in, d_out, rng, zero_init=zero_init)
            self.fc2 = None
        else:
            # Zero-init only the last layer so gradients still reach fc1.
            self.fc1 = Linear(store, f"{prefix}.fc1", d_in, d_out, rng)
            self.fc2 = Linear(store, f"{prefix}.fc2", d_out, d_out, rng, zero_init=zero_init)

    def __call__(self, x: Tensor) -> Tensor:
        out = self.fc1(x)
        if self.fc2 is not None:
            out = self.fc2(ad.gelu(out))
        return out

    @staticmethod
    def param_count(kind: str, d_in: int, d_out: int) -> int:
        if kind == "linear":
            return Linear.param_count(d_in, d_out)
        return Linear.param_count(d_in, d_out) + Linear.param_count(d_out, d_out)


# ---------------------------------------------------------------------------
# Fusion modules
# ---------------------------------------------------------------------------


class CrossAttention:
    """Multi-head attention with queries from one stream, keys/values from another."""

    def __init__(self, store: ParamStore, prefix: str, dim: int, heads: int, rng: Rng):
        self.heads = heads
        self.wq = Linear(store, f"{prefix}.wq", dim, dim, rng)
        self.wk = Linear(store, f"{prefix}.wk", dim, dim, rng)
        self.wv = Linear(store, f"{prefix}.wv", dim, dim, rng)
        self.wo = Linear(store, f"{prefix}.wo", dim, dim, rng)

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        out = ad.attention(self.wq(queries), self.wk(context), self.wv(context),
                           self.heads, causal=False)
        return self.wo(out)

    @staticmethod
    def param_count(dim: int) -> int:
        return 4 * Linear.param_count(dim, dim)


class GatedCrossAttnBlock:
    """Cross-attention + feed-forward, each scaled by tanh of a zero-init gate.

    With both gates at zero the block's branch output is exactly zero, so it
    is the identity on the hidden states at initialization.
    """

    def __init__(self, store: ParamStore, prefix: str, dim: int, heads: int,
                 rng: Rng, gate_init: float = 0.0):
        self.ln1 = LayerNorm(store, f"{prefix}.ln1", dim)
        self.xattn = CrossAttention(store, f"{prefix}.xattn", dim, heads, rng)
        self.g_attn = store.add(f"{prefix}.g_attn", np.asarray(gate_init))
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", dim)
        self.ff = Mlp(store, f"{prefix}.ff", dim, dim * GATED_FF_RATIO, rng)
        self.g_ff = store.add(f"{prefix}.g_ff", np.asarray(gate_init))

    def branch(self, h: Tensor, context: Tensor) -> Tensor:
        """The additive update this block contributes on top of ``h``."""
        attn_part = ad.scale_by(self.xattn(self.ln1(h), context),
                                ad.tanh(self.g_attn.tensor))
        h_mid = ad.add(h, attn_part)
        ff_part = ad.scale_by(self.ff(self.ln2(h_mid)), ad.tanh(self.g_ff.tensor))
        return ad.add(attn_part, ff_part)

    @staticmethod
    def param_count(dim: int) -> int:
        return (LayerNorm.param_count(dim) * 2
                + CrossAttention.param_count(dim)
                + Mlp.param_count(dim, dim * GATED_FF_RATIO)
                + 2)


class InternalHook:
    """Per-LM-layer fusion update in the residual form h' = h + branch(h)."""

    def __init__(self, placement: str, branch_fn):
        self.placement = placement  # "pre" | "post" | "parallel"
        self._branch_fn = branch_fn

    def branch(self, h: Tensor) -> Tensor:
        return self._branch_fn(h)

    def apply(self, h: Tensor) -> Tensor:
        return ad.add(h, self.branch(h))


class FusionBundle:
    """All plan-owned modules: the input projector plus fusion machinery.

    The input projector maps the ending-layer (penultimate) feature to the LM
    width; stack-D and mean-group widen it instead of adding a second one,
    which is what keeps external direct fusion at a single projector.
    """

    def __init__(self, plan: FusionPlan, enc_cfg: EncoderConfig, lm_dim: int,
                 lm_depth: int, lm_heads: int, store: ParamStore,
                 proj_rng: Rng, fuse_rng: Rng):
        self.plan = plan
        self.enc_cfg = enc_cfg
        self.lm_dim = lm_dim
        self.ending = ending_layer(enc_cfg.depth)
        d = enc_cfg.width
        k = plan.layer_set.k
        kind = plan.projector_kind

        reason = validate_plan(plan, enc_cfg.depth, lm_depth)
        if reason:
            raise ConfigError(f"invalid fusion plan: {reason}")

        if plan.position == "external" and plan.variant == "stack-D":
            in_dim = (k + 1) * d
        elif plan.position == "external" and plan.variant == "mean-group":
            in_dim = 2 * d
        else:
            in_dim = d
        self.input_proj = Projector(store, "proj.in", kind, in_dim, lm_dim, proj_rng)

        self.fuse_proj: Projector | None = None
        self.layer_projs: dict[int, Projector] = {}
        self.gated_blocks: dict[int, GatedCrossAttnBlock] = {}
        self.enhancer: CrossAttention | None = None
        self.alignment: dict[int, int] = {}

        if plan.is_baseline:
            return

        if plan.position == "external":
            if plan.pattern == "modular":
                self.fuse_proj = Projector(store, "fuse.p", kind, d, lm_dim,
                                           fuse_rng, zero_init=True)
                self.enhancer = CrossAttention(store, "fuse.enhancer", lm_dim,
                                               lm_heads, fuse_rng)
            elif plan.variant in ("add", "stack-N"):
                self.fuse_proj = Projector(store, "fuse.p", kind, d, lm_dim,
                                           fuse_rng, zero_init=True)
            # stack-D / mean-group fuse through the widened input projector.
        else:
            self.alignment = align_layers(plan.layer_set.indices,
                                          enc_cfg.depth, lm_depth)
            zero = plan.pattern == "direct"
            for enc_layer in plan.layer_set.indices:
                self.layer_projs[enc_layer] = Projector(
                    store, f"fuse.p.{enc_layer}", kind, d, lm_dim,
                    fuse_rng, zero_init=zero)
                if plan.pattern == "modular":
                    self.gated_blocks[enc_layer] = GatedCrossAttnBlock(
                        store, f"fuse.xattn.{enc_layer}", lm_dim, lm_heads,
                        fuse_rng, gate_init=plan.gate_init)

    # -- external path ------------------------------------------------------

    def selected(self, feats: VisualFeatureSet) -> list[Tensor]:
        return [feats.layer(i) for i in self.plan.layer_set.indices]

    def visual_tokens(self, feats: VisualFeatureSet) -> Tensor:
        """Produce the LM-input visual block V' for this plan."""
        v_end = feats.layer(self.ending)
        plan = self.plan
        if plan.is_baseline or plan.position == "internal":
            return self.input_proj(v_end)
        if plan.pattern == "modular":
            return self.external_modular_enhance(self.selected(feats),
                                                 self.input_proj(v_end))
        if plan.variant in ("add", "stack-N"):
            return self.external_fuse(self.input_proj(v_end), feats)
        # stack-D / mean-group rebuild V' from raw features through the
        # widened single projector; there is no separately projected base.
        return self.external_fuse(None, feats)

    def external_fuse(self, v: Tensor | None, feats: VisualFeatureSet) -> Tensor:
        """Direct external fusion of the selected features into V.

        ``v`` is the baseline-projected visual block, required by the add and
        stack-N variants and unused by stack-D / mean-group.
        """
        plan = self.plan
        if plan.layer_set.k == 0:
            raise ConfigError("external fusion needs a non-empty layer selection")
        sel = self.selected(feats)
        n_tokens = sel[0].shape[0]
        for i, f in zip(plan.layer_set.indices, sel):
            if f.shape[0] != n_tokens:
                raise DimensionError(
                    f"layer {i} feature has {f.shape[0]} tokens, expected {n_tokens}")
        if plan.variant in ("add", "stack-N"):
            if v is None:
                raise ConfigError(f"variant '{plan.variant}' requires the base visual block")
            if v.shape[0] != n_tokens:
                raise DimensionError(
                    f"visual block has {v.shape[0]} tokens, features have {n_tokens}")
            projected = [self.fuse_proj(f) for f in sel]
            if plan.variant == "add":
                return ad.add(v, ad.mean_tensors(projected))
            return ad.concat_tokendim([v] + projected)
        v_end = feats.layer(self.ending)
        if plan.variant == "stack-D":
            stacked = ad.concat_lastdim(sel + [v_end])
            return self.input_proj(stacked)
        if plan.variant == "mean-group":
            group = ad.mean_tensors(sel)
            return self.input_proj(ad.concat_lastdim([group, v_end]))
        raise ConfigError(f"unknown external-direct variant '{plan.variant}'")

    def external_modular_enhance(self, selected: list[Tensor], v: Tensor) -> Tensor:
        """Cross-attend V over the projected multi-layer tokens; residual into V."""
        if not selected:
            raise ConfigError("external modular enhancement needs a non-empty selection")
        context = ad.concat_tokendim([self.fuse_proj(f) for f in selected])
        return ad.add(v, self.enhancer(v, context))

    # -- internal path ------------------------------------------------------

    def internal_hooks(self, feats: VisualFeatureSet, n_visual: int,
                       visual_start: int = 0) -> dict[int, InternalHook]:
        """LM-layer -> hook mapping realizing the plan's internal fusion."""
        plan = self.plan
        if plan.is_baseline or plan.position != "internal":
            return {}
        hooks: dict[int, InternalHook] = {}
        for enc_layer, lm_layer in self.alignment.items():
            v_i = feats.layer(enc_layer)
            if v_i.shape[0] != n_visual:
                raise DimensionError(
                    f"layer {enc_layer} feature has {v_i.shape[0]} tokens, expected {n_visual}")
            proj = self.layer_projs[enc_layer]
            if plan.pattern == "direct":
                hooks[lm_layer] = InternalHook(
                    "pre", self._direct_branch_fn(proj, v_i, visual_start))
            else:
                placement = {"pre-cross": "pre", "post-cross": "post",
                             "parallel": "parallel"}[plan.variant]
                block = self.gated_blocks[enc_layer]
                hooks[lm_layer] = InternalHook(
                    placement, self._modular_branch_fn(block, proj, v_i))
        return hooks

    @staticmethod
    def _direct_branch_fn(proj: Projector, v_i: Tensor, start: int):
        def branch(h: Tensor) -> Tensor:
            update = proj(v_i)
            zeros = Tensor(np.zeros(h.shape))
            return ad.add_rows(zeros, update, start)

        return branch

    @staticmethod
    def _modular_branch_fn(block: GatedCrossAttnBlock, proj: Projector, v_i: Tensor):
        def branch(h: Tensor) -> Tensor:
            return block.branch(h, proj(v_i))

        return branch


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------


def count_parameters(plan: FusionPlan, enc_width: int, lm_dim: int) -> dict[str, int]:
    """Closed-form count of parameters a plan introduces beyond the baseline.

    ``projector_params``/``module_params`` count what the plan constructs for
    fusion; ``total_new`` is the net difference against the baseline model
    (negative contributions arise only when a variant widens the shared input
    projector, replacing the baseline one).
    """
    d, dim = enc_width, lm_dim
    kind = plan.projector_kind
    base_in = Projector.param_count(kind, d, dim)
    k = plan.layer_set.k

    projector = 0
    modules = 0
    replaced = 0
    if not plan.is_baseline:
        if plan.position == "external":
            if plan.pattern == "modular":
                projector = Projector.param_count(kind, d, dim)
                modules = CrossAttention.param_count(dim)
            elif plan.variant in ("add", "stack-N"):
                projector = Projector.param_count(kind, d, dim)
            elif plan.variant == "stack-D":
                projector = Projector.param_count(kind, (k + 1) * d, dim)
                replaced = base_in
            elif plan.variant == "mean-group":
                projector = Projector.param_count(kind, 2 * d, dim)
                replaced = base_in
        else:
            projector = k * Projector.param_count(kind, d, dim)
            if plan.pattern == "modular":
                modules = k * GatedCrossAttnBlock.param_count(dim)

    return {
        "projector_params": projector,
        "module_params": modules,
        "total_new": projector + modules - replaced,
    }
