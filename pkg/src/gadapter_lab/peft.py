"""Fine-tuning strategies as hooks and freeze masks over the backbone.

The structure-aware block (the "G-Adapter") applies a graph convolution
with a low-rank weight between two LayerNorms:

    X'  = LN_pre(X)
    X'' = LN_post(X' + act(S X' W_down W_up))

Note the activation wraps the whole product, unlike the classic Adapter
X + act(X W_down) W_up where it sits between the projections.

Baselines: Adapter (+S variant replaces X W_down with S X W_down), LoRA on
the query/value projections (+S variant), BitFit (bias/LayerNorm/head
only), Hyperformer (adapter weights generated from a task embedding),
Compacter (Kronecker-factorized adapter weights, first factors shared
globally), and MAM (LoRA on Q/V plus a scaled parallel FFN adapter; an
approximation, since the original MAM's prefix-tuning half is out of
scope here).

Every method leaves the prediction head trainable. Up-projections (or
their generators) initialize to zero, so each instrumented model
reproduces the backbone's behavior at step 0 (for the structure-aware
block: the backbone's behavior composed with its two LayerNorms).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import HookCtx, Model
from .tensor import Tensor, init_params

METHODS = (
    "full",
    "adapter",
    "adapter_s",
    "lora",
    "lora_s",
    "bitfit",
    "hyperformer",
    "compacter",
    "mam",
    "gadapter",
)
INSERTIONS = ("pre_mha", "post_mha", "pre_ffn", "mid_ffn", "post_ffn", "mha_and_ffn")

# methods whose blocks multiply by the structure matrix
_STRUCTURAL = ("gadapter", "adapter_s", "lora_s")
# paper defaults: the structure-aware block sits mid-FFN, classic adapters
# go after both sublayers
_DEFAULT_INSERTION = {
    "gadapter": "mid_ffn",
    "adapter": "mha_and_ffn",
    "adapter_s": "mha_and_ffn",
    "hyperformer": "mha_and_ffn",
    "compacter": "mha_and_ffn",
    "mam": "post_ffn",  # the parallel branch rides the FFN sublayer
}


@dataclass(frozen=True)
class PeftSpec:
    method: str = "gadapter"
    r: int = 4
    structure: str = "S1"
    insertion: str | None = None  # None = per-method default
    lora_scale: float = 1.0
    alpha: float = 0.5
    beta: float = 0.5
    hyper_t: int = 1
    compacter_n: int = 4
    no_S: bool = False
    no_pre_ln: bool = False
    no_post_ln: bool = False
    no_act: bool = False
    no_breg: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.insertion is not None and self.insertion not in INSERTIONS:
            raise ConfigError(f"unknown insertion {self.insertion!r}")
        if self.r < 1:
            raise ConfigError("bottleneck r must be positive")
        if self.lora_scale < 1.0:
            raise ConfigError("lora scale must be >= 1")
        if self.hyper_t < 1:
            raise ConfigError("hyperformer task dim must be >= 1")
        if any((self.no_S, self.no_pre_ln, self.no_post_ln, self.no_act)) and self.method != "gadapter":
            raise ConfigError("component ablation flags apply to the gadapter method only")

    @property
    def resolved_insertion(self) -> str | None:
        if self.insertion is not None:
            return self.insertion
        return _DEFAULT_INSERTION.get(self.method)

    @property
    def uses_structure(self) -> bool:
        if self.method == "gadapter":
            return not self.no_S
        return self.method in _STRUCTURAL


@dataclass(frozen=True)
class FreezeMask:
    """Names allowed to move during fine-tuning; everything else is frozen."""

    trainable: frozenset[str]

    def __contains__(self, name: str) -> bool:
        return name in self.trainable


def _require_structure(ctx: HookCtx) -> Tensor:
    if ctx.s_peft is None:
        raise ConfigError("this method needs a structure matrix but the batch carries none")
    return ctx.s_peft


def _identity_like(x: Tensor) -> Tensor:
    bsz, m, _ = x.shape
    return Tensor(np.ascontiguousarray(np.broadcast_to(np.eye(m), (bsz, m, m))))


# ---------------------------------------------------------------------------
# Block forward rules (pure functions of tensors; blocks bind parameters).


def gadapter_forward(x: Tensor, s: Tensor | None, block: "GAdapterBlock") -> Tensor:
    """LN_post(LN_pre(X) + act(S LN_pre(X) W_down W_up)), flags applied.

    no_S runs the same matmul against an identity matrix so the flag is
    exactly the S = I case.
    """
    spec = block.spec
    xp = x if spec.no_pre_ln else T.layer_norm(x, block.ln_pre_g, block.ln_pre_b, eps=block.eps)
    mixed = T.matmul(_identity_like(x) if spec.no_S else s, xp)
    h = T.matmul(T.matmul(mixed, block.w_down), block.w_up)
    if not spec.no_act:
        h = T.relu(h)
    out = T.add(xp, h)
    if not spec.no_post_ln:
        out = T.layer_norm(out, block.ln_post_g, block.ln_post_b, eps=block.eps)
    return out


def adapter_forward(x: Tensor, block: "AdapterBlock", with_structure: bool, s: Tensor | None) -> Tensor:
    """Classic bottleneck: X + act(X W_down) W_up, optionally S X W_down."""
    h = T.matmul(s, x) if with_structure else x
    h = T.matmul(T.relu(T.matmul(h, block.w_down)), block.w_up)
    return T.add(x, h)


def lora_forward(
    x: Tensor,
    w_star: Tensor,
    b_star: Tensor,
    w_down: Tensor,
    w_up: Tensor,
    scale: float,
    s: Tensor | None = None,
) -> Tensor:
    """X W* + b* + scale * (S) X W_down W_up."""
    base = T.add_rowvec(T.matmul(x, w_star), b_star)
    h = x if s is None else T.matmul(s, x)
    delta = T.matmul(T.matmul(h, w_down), w_up)
    return T.add(base, T.mul(delta, scale))


def compacter_weight(a_factors: list[Tensor], b_factors: list[Tensor]) -> Tensor:
    """W = sum_i A_i kron B_i."""
    if len(a_factors) != len(b_factors) or not a_factors:
        raise ConfigError("compacter needs equal, nonzero factor counts")
    acc = T.kron(a_factors[0], b_factors[0])
    for a, b in zip(a_factors[1:], b_factors[1:]):
        acc = T.add(acc, T.kron(a, b))
    return acc


def hyperformer_generate(i_tau: Tensor, w_d: Tensor, w_u: Tensor, d: int, r: int) -> tuple[Tensor, Tensor]:
    """(W_down, W_up) = (reshape(W_D I_tau), reshape(W_U I_tau))."""
    tau = T.reshape(i_tau, (i_tau.size, 1))
    w_down = T.reshape(T.matmul(w_d, tau), (d, r))
    w_up = T.reshape(T.matmul(w_u, tau), (r, d))
    return w_down, w_up


# ---------------------------------------------------------------------------
# Blocks: parameter owners whose bound forwards become model hooks.


class GAdapterBlock:
    def __init__(self, model: Model, prefix: str, spec: PeftSpec):
        d, r = model.config.hidden, spec.r
        self.spec = spec
        self.eps = model.config.ln_eps
        reg = lambda nm, shape, scheme: model.store.register(
            f"{prefix}.{nm}", init_params(shape, scheme, model._seed()), role="adapter"
        )
        self.w_down = reg("w_down", (d, r), "xavier_uniform")
        # An exactly-zero W_up would silence this block forever: the
        # activation wraps the whole product, so its pre-activation would be
        # identically 0 and relu'(0) = 0 blocks every gradient into both
        # projections. A vanishing scale keeps step-0 outputs within 1e-10
        # of the pure LN composition while letting training move the block.
        w_up = init_params((r, d), "xavier_uniform", model._seed())
        w_up.data *= 1e-12
        self.w_up = model.store.register(f"{prefix}.w_up", w_up, role="adapter")
        if not spec.no_pre_ln:
            self.ln_pre_g = reg("ln_pre.g", (d,), "ones")
            self.ln_pre_b = reg("ln_pre.b", (d,), "zeros")
        if not spec.no_post_ln:
            self.ln_post_g = reg("ln_post.g", (d,), "ones")
            self.ln_post_b = reg("ln_post.b", (d,), "zeros")

    def __call__(self, x: Tensor, ctx: HookCtx) -> Tensor:
        s = None if self.spec.no_S else _require_structure(ctx)
        return gadapter_forward(x, s, self)


class AdapterBlock:
    def __init__(self, model: Model, prefix: str, spec: PeftSpec, with_structure: bool):
        d, r = model.config.hidden, spec.r
        self.with_structure = with_structure
        self.w_down = model.store.register(
            f"{prefix}.w_down", init_params((d, r), "xavier_uniform", model._seed()), role="adapter"
        )
        self.w_up = model.store.register(f"{prefix}.w_up", init_params((r, d), "zeros", model._seed()), role="adapter")

    def __call__(self, x: Tensor, ctx: HookCtx) -> Tensor:
        s = _require_structure(ctx) if self.with_structure else None
        return adapter_forward(x, self, self.with_structure, s)


class ParallelAdapterBranch:
    """MAM's FFN-parallel branch: scale * act(X W_down) W_up, no residual
    (the model adds it onto the FFN output)."""

    def __init__(self, model: Model, prefix: str, spec: PeftSpec):
        d, r = model.config.hidden, spec.r
        self.scale = spec.lora_scale
        self.w_down = model.store.register(
            f"{prefix}.w_down", init_params((d, r), "xavier_uniform", model._seed()), role="adapter"
        )
        self.w_up = model.store.register(f"{prefix}.w_up", init_params((r, d), "zeros", model._seed()), role="adapter")

    def __call__(self, x: Tensor, ctx: HookCtx) -> Tensor:
        return T.mul(T.matmul(T.relu(T.matmul(x, self.w_down)), self.w_up), self.scale)


class HyperformerState:
    """Shared generator: one task embedding produces every block's weights.

    W_U and W_B start at zero so generated up-projections and LN offsets
    are zero: the block is the identity at step 0. W_G starts at ones with
    I_tau = ones, so the generated LN gain begins at 1.
    """

    def __init__(self, model: Model, spec: PeftSpec):
        d, r, t = model.config.hidden, spec.r, spec.hyper_t
        self.d, self.r = d, r
        self.eps = model.config.ln_eps
        reg = lambda nm, shape, scheme: model.store.register(
            f"peft.hyper.{nm}", init_params(shape, scheme, model._seed()), role="adapter"
        )
        self.i_tau = reg("i_tau", (t,), "ones")
        self.w_d = reg("w_d", (d * r, t), "xavier_uniform")
        self.w_u = reg("w_u", (r * d, t), "zeros")
        self.w_g = reg("w_g", (d, t), "ones")
        self.w_b = reg("w_b", (d, t), "zeros")

    def __call__(self, x: Tensor, ctx: HookCtx) -> Tensor:
        w_down, w_up = hyperformer_generate(self.i_tau, self.w_d, self.w_u, self.d, self.r)
        tau = T.reshape(self.i_tau, (self.i_tau.size, 1))
        gamma = T.reshape(T.matmul(self.w_g, tau), (self.d,))
        beta = T.reshape(T.matmul(self.w_b, tau), (self.d,))
        branch = T.matmul(T.relu(T.matmul(x, w_down)), w_up)
        return T.add(x, T.layer_norm(branch, gamma, beta, eps=self.eps))


class CompacterBlock:
    """Adapter whose projections are sums of Kronecker products; the A_i
    factors are shared across every block (passed in, registered once)."""

    def __init__(self, model: Model, prefix: str, spec: PeftSpec, a_factors: list[Tensor]):
        d, r, n = model.config.hidden, spec.r, spec.compacter_n
        self.a_factors = a_factors
        reg = lambda nm, shape, scheme: model.store.register(
            f"{prefix}.{nm}", init_params(shape, scheme, model._seed()), role="adapter"
        )
        self.b_down = [reg(f"b_down.{i}", (d // n, r // n), "xavier_uniform") for i in range(n)]
        self.b_up = [reg(f"b_up.{i}", (r // n, d // n), "zeros") for i in range(n)]

    def __call__(self, x: Tensor, ctx: HookCtx) -> Tensor:
        w_down = compacter_weight(self.a_factors, self.b_down)
        w_up = compacter_weight(self.a_factors, self.b_up)
        h = T.matmul(T.relu(T.matmul(x, w_down)), w_up)
        return T.add(x, h)


# ---------------------------------------------------------------------------
# Instrumentation.


def _slots(insertion: str) -> tuple[str, ...]:
    return ("post_mha", "post_ffn") if insertion == "mha_and_ffn" else (insertion,)


def _validate(model: Model, spec: PeftSpec) -> None:
    c = model.config
    if spec.r > c.hidden:
        raise ConfigError(f"r={spec.r} exceeds hidden={c.hidden}")
    ins = spec.resolved_insertion
    if spec.method in ("full", "bitfit", "lora", "lora_s") and spec.insertion is not None:
        raise ConfigError(f"method {spec.method} takes no insertion position")
    if ins is not None and "mid_ffn" in _slots(ins) and c.ffn_dim != c.hidden:
        raise ConfigError(f"mid_ffn insertion requires ffn_dim == hidden, got {c.ffn_dim} != {c.hidden}")
    if spec.method == "compacter":
        n = spec.compacter_n
        if c.hidden % n != 0 or spec.r % n != 0:
            raise ConfigError(f"compacter_n={n} must divide hidden={c.hidden} and r={spec.r}")
    if model.peft_spec is not None or any(model.hooks) or any(model.projections):
        raise ConfigError("model is already instrumented")
    for name in model.store.names():
        if name.startswith("peft."):
            raise ConfigError("model is already instrumented")


def _install_lora(model: Model, spec: PeftSpec, with_structure: bool) -> None:
    d, r = model.config.hidden, spec.r
    for i in range(model.config.num_layers):
        for which in ("q", "v"):
            prefix = f"peft.{i}.lora_{which}"
            # zero down-projection pins the step-0 output to the backbone
            w_down = model.store.register(prefix + ".w_down", init_params((d, r), "zeros", model._seed()), role="adapter")
            w_up = model.store.register(
                prefix + ".w_up", init_params((r, d), "xavier_uniform", model._seed()), role="adapter"
            )
            w_star = model.param(f"enc.{i}.attn.w_{which}")
            b_star = model.param(f"enc.{i}.attn.b_{which}")

            def project(x, ctx, _w=w_star, _b=b_star, _d=w_down, _u=w_up):
                s = _require_structure(ctx) if with_structure else None
                return lora_forward(x, _w, _b, _d, _u, spec.lora_scale, s)

            model.projections[(i, which)] = project


def instrument(model: Model, spec: PeftSpec) -> FreezeMask:
    """Install the method's hooks/projections and build its freeze mask.

    Registers all introduced parameters (named under "peft."), applies the
    mask to the store, and returns it. The prediction head stays trainable
    for every method.
    """
    _validate(model, spec)
    method = spec.method
    if method in ("adapter", "adapter_s", "gadapter", "hyperformer", "compacter"):
        slots_per_layer = _slots(spec.resolved_insertion)
        shared_a: list[Tensor] | None = None
        hyper: HyperformerState | None = None
        if method == "compacter":
            n = spec.compacter_n
            shared_a = [
                model.store.register(
                    f"peft.compacter.a.{i}", init_params((n, n), "xavier_uniform", model._seed()), role="adapter"
                )
                for i in range(n)
            ]
        if method == "hyperformer":
            hyper = HyperformerState(model, spec)
        for i in range(model.config.num_layers):
            for slot in slots_per_layer:
                prefix = f"peft.{i}.{slot}"
                if method == "gadapter":
                    block = GAdapterBlock(model, prefix, spec)
                elif method == "adapter":
                    block = AdapterBlock(model, prefix, spec, with_structure=False)
                elif method == "adapter_s":
                    block = AdapterBlock(model, prefix, spec, with_structure=True)
                elif method == "compacter":
                    block = CompacterBlock(model, prefix, spec, shared_a)
                else:
                    block = hyper  # one shared generator serves all slots
                model.hooks[(i, slot)] = block
    elif method in ("lora", "lora_s"):
        _install_lora(model, spec, with_structure=(method == "lora_s"))
    elif method == "mam":
        _install_lora(model, spec, with_structure=False)
        for i in range(model.config.num_layers):
            model.hooks[(i, "parallel_ffn")] = ParallelAdapterBranch(model, f"peft.{i}.parallel_ffn", spec)
    elif method in ("full", "bitfit"):
        pass
    else:  # pragma: no cover - guarded by PeftSpec validation
        raise ConfigError(f"unknown method {method!r}")

    if method == "full":
        mask = FreezeMask(frozenset(model.store.names()))
    elif method == "bitfit":
        mask = bitfit_mask(model)
    else:
        trainable = {p.name for p in model.store if p.name.startswith("peft.") or p.role == "head"}
        mask = FreezeMask(frozenset(trainable))
    model.store.apply_mask(set(mask.trainable))
    model.peft_spec = spec
    return mask


def bitfit_mask(model: Model) -> FreezeMask:
    """Bias terms, LayerNorm affines, and the head; never a weight matrix."""
    names = {p.name for p in model.store if p.role in ("bias", "ln", "head")}
    return FreezeMask(frozenset(names))


def trainable_ratio(model: Model) -> float:
    """gamma = trainable scalars / total scalars, introduced modules included."""
    return model.store.trainable_scalars() / model.store.total_scalars()
