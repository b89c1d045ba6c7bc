"""MLP policies, value nets, embedding tables, Adam, and checkpoint I/O.

All parameters are float64. Every net keeps its parameters as a flat ordered
list of Tensors so the optimizer state and checkpoints line up by index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
LOG_2PI = float(np.log(2.0 * np.pi))
LN_EPS = 1e-5

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple
    output_dim: int
    activation: str = "elu"
    layernorm: bool = False

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        if self.activation not in ("elu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "layernorm": self.layernorm,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            output_dim=int(d["output_dim"]),
            activation=d["activation"],
            layernorm=bool(d["layernorm"]),
        )


class Mlp:
    """Feed-forward net: hidden blocks of linear -> activation (-> layernorm),
    then a final linear layer. The final layer doubles as the output head."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator, out_scale=1.0):
        self.spec = spec
        self.weights = []
        self.biases = []
        self.ln_gammas = []
        self.ln_betas = []
        dims = (spec.input_dim, *spec.hidden_dims, spec.output_dim)
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            if i == len(dims) - 2:
                w *= out_scale
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
        if spec.layernorm:
            for h in spec.hidden_dims:
                self.ln_gammas.append(Tensor(np.ones(h), requires_grad=True))
                self.ln_betas.append(Tensor(np.zeros(h), requires_grad=True))

    def parameters(self):
        params = []
        for w, b in zip(self.weights, self.biases):
            params.append(w)
            params.append(b)
        for g, b in zip(self.ln_gammas, self.ln_betas):
            params.append(g)
            params.append(b)
        return params

    def _check_input(self, x_shape):
        if x_shape[-1] != self.spec.input_dim:
            raise ad.GradError(
                f"input shape {tuple(x_shape)} does not match net input dim "
                f"({self.spec.input_dim},)"
            )

    def forward(self, x: Tensor, mask_sink=None) -> Tensor:
        """Graph-building forward pass.

        When ``mask_sink`` is a list, the post-linear activation masks
        (relu only) are appended to it; the gradient-penalty builder in the
        adversarial trainer needs them.
        """
        self._check_input(x.data.shape)
        act = ad.elu if self.spec.activation == "elu" else ad.relu
        h = x
        n_hidden = len(self.spec.hidden_dims)
        for i in range(n_hidden):
            z = ad.add(ad.matmul(h, self.weights[i]), self.biases[i])
            if mask_sink is not None:
                if self.spec.activation != "relu":
                    raise ad.GradError("activation masks only defined for relu nets")
                mask_sink.append(z.data > 0.0)
            h = act(z)
            if self.spec.layernorm:
                m = ad.mean_last(h)
                d = ad.sub(h, m)
                v = ad.mean_last(ad.mul(d, d))
                xn = ad.div(d, ad.sqrt(ad.add(v, Tensor(np.array(LN_EPS)))))
                h = ad.add(ad.mul(xn, self.ln_gammas[i]), self.ln_betas[i])
        return ad.add(ad.matmul(h, self.weights[-1]), self.biases[-1])

    def infer(self, x: np.ndarray) -> np.ndarray:
        """Plain-numpy forward pass for rollouts (no graph construction)."""
        self._check_input(x.shape)
        h = np.asarray(x, dtype=np.float64)
        for i in range(len(self.spec.hidden_dims)):
            z = h @ self.weights[i].data + self.biases[i].data
            if self.spec.activation == "elu":
                h = np.where(z >= 0.0, z, np.exp(np.minimum(z, 0.0)) - 1.0)
            else:
                h = np.maximum(z, 0.0)
            if self.spec.layernorm:
                m = h.mean(axis=-1, keepdims=True)
                d = h - m
                v = (d * d).mean(axis=-1, keepdims=True)
                h = d / np.sqrt(v + LN_EPS) * self.ln_gammas[i].data + self.ln_betas[i].data
        return h @ self.weights[-1].data + self.biases[-1].data


class Adam:
    """Bias-corrected Adam over an ordered parameter list."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            p.data -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def state_arrays(self):
        return {"m": self.m, "v": self.v, "t": self.t}

    def load_state(self, m, v, t):
        self.m = [np.array(a, dtype=np.float64) for a in m]
        self.v = [np.array(a, dtype=np.float64) for a in v]
        self.t = int(t)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional single Adam update used by the optimizer above.

    ``state`` is (m_list, v_list, t); returns updated values and new state.
    """
    m_list, v_list, t = state
    t = t + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_vals, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_list, v_list):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_vals.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_vals, (new_m, new_v, t)


class EmbeddingTable:
    """Trainable rows, one per motion index within a partition."""

    def __init__(self, rows: int, dim: int, rng: np.random.Generator):
        self.table = Tensor(rng.standard_normal((rows, dim)) / np.sqrt(dim), requires_grad=True)

    @property
    def rows(self):
        return self.table.data.shape[0]

    @property
    def dim(self):
        return self.table.data.shape[1]

    def lookup(self, idx) -> np.ndarray:
        return self.table.data[np.asarray(idx, dtype=np.intp)]

    def lookup_graph(self, idx) -> Tensor:
        return ad.gather_rows(self.table, idx)

    def parameters(self):
        return [self.table]


class PolicyNet:
    """Gaussian policy: MLP mean head plus a state-independent log-std vector."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator,
                 init_log_std=-1.2, mean_out_scale=0.01):
        self.mlp = Mlp(spec, rng, out_scale=mean_out_scale)
        self.log_std = Tensor(np.full(spec.output_dim, float(init_log_std)), requires_grad=True)

    @property
    def spec(self):
        return self.mlp.spec

    @property
    def action_dim(self):
        return self.mlp.spec.output_dim

    def parameters(self):
        return self.mlp.parameters() + [self.log_std]

    def act_mean(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic action: the mean of the action distribution."""
        return self.mlp.infer(obs)

    def _std(self):
        return np.exp(np.clip(self.log_std.data, LOG_STD_MIN, LOG_STD_MAX))

    def sample(self, obs: np.ndarray, rng: np.random.Generator):
        """Stochastic action and its log-density, elementwise Gaussian."""
        mean = self.mlp.infer(obs)
        std = self._std()
        noise = rng.standard_normal(mean.shape)
        action = mean + std * noise
        log_prob = self.log_prob_values(action, mean)
        return action, log_prob

    def log_prob_values(self, actions, mean):
        ls = np.clip(self.log_std.data, LOG_STD_MIN, LOG_STD_MAX)
        z = (actions - mean) / np.exp(ls)
        return (-0.5 * z * z - ls - 0.5 * LOG_2PI).sum(axis=-1)

    def mean_graph(self, obs: np.ndarray) -> Tensor:
        return self.mlp.forward(Tensor(obs))

    def log_prob_graph(self, obs: np.ndarray, actions: np.ndarray) -> Tensor:
        """Differentiable per-row log-density of fixed actions under the policy."""
        mu = self.mean_graph(obs)
        ls = ad.clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
        z = ad.mul(ad.sub(Tensor(actions), mu), ad.exp(ad.neg(ls)))
        per_dim = ad.sub(ad.scale(ad.mul(z, z), -0.5), ls)
        summed = ad.reshape(ad.sum_last(per_dim), (-1,))
        return ad.sub(summed, Tensor(np.array(0.5 * LOG_2PI * self.action_dim)))

    def entropy_graph(self) -> Tensor:
        ls = ad.clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
        return ad.add(ad.total(ls), Tensor(np.array(0.5 * self.action_dim * (1.0 + LOG_2PI))))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_bundle(path, kind, spec_dict, params, optimizer=None, extras=None, meta=None):
    """Write a parameter bundle as .npz: params + Adam moments + JSON header."""
    arrays = {}
    for i, p in enumerate(params):
        arrays[f"param_{i}"] = p.data
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "spec": spec_dict,
        "n_params": len(params),
        "meta": meta or {},
    }
    if optimizer is not None:
        for i, (m, v) in enumerate(zip(optimizer.m, optimizer.v)):
            arrays[f"adam_m_{i}"] = m
            arrays[f"adam_v_{i}"] = v
        header["adam"] = {"t": optimizer.t, "lr": optimizer.lr,
                          "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                          "eps": optimizer.eps}
    if extras:
        for name, arr in extras.items():
            arrays[f"extra_{name}"] = np.asarray(arr)
        header["extras"] = sorted(extras.keys())
    arrays["__header__"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_bundle(path):
    """Read a bundle; returns (header dict, params list, adam arrays, extras)."""
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint version {header['version']} unsupported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        params = [np.array(data[f"param_{i}"]) for i in range(header["n_params"])]
        adam = None
        if "adam" in header:
            adam = {
                "m": [np.array(data[f"adam_m_{i}"]) for i in range(header["n_params"])],
                "v": [np.array(data[f"adam_v_{i}"]) for i in range(header["n_params"])],
                "t": header["adam"]["t"],
                "hyper": header["adam"],
            }
        extras = {}
        for name in header.get("extras", []):
            extras[name] = np.array(data[f"extra_{name}"])
    return header, params, adam, extras


def assign_params(params, values):
    if len(params) != len(values):
        raise ValueError(f"parameter count mismatch: {len(params)} vs {len(values)}")
    for p, v in zip(params, values):
        if p.data.shape != v.shape:
            raise ValueError(f"parameter shape mismatch: {p.data.shape} vs {v.shape}")
        p.data = np.array(v, dtype=np.float64)


def save_policy(path, policy: PolicyNet, optimizer=None, meta=None, extras=None):
    save_bundle(path, "policy", policy.spec.to_dict(), policy.parameters(),
                optimizer=optimizer, extras=extras, meta=meta)


def load_policy(path):
    header, params, adam, extras = load_bundle(path)
    if header["kind"] != "policy":
        raise ValueError(f"expected a policy checkpoint, got {header['kind']!r}")
    spec = MlpSpec.from_dict(header["spec"])
    policy = PolicyNet(spec, np.random.default_rng(0))
    assign_params(policy.parameters(), params)
    optimizer = None
    if adam is not None:
        hyper = adam["hyper"]
        optimizer = Adam(policy.parameters(), lr=hyper["lr"], beta1=hyper["beta1"],
                         beta2=hyper["beta2"], eps=hyper["eps"])
        optimizer.load_state(adam["m"], adam["v"], adam["t"])
    return policy, optimizer, header["meta"], extras
