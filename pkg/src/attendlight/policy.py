"""AttendLight actor and critic.

Lane features are embedded by one shared affine map, pooled into one vector per
phase by the state-attention (query = mean embedding of the phase's
participating lanes), the active phase's vector drives an LSTM, and the
action-attention scores every phase vector against the LSTM output. Nothing
depends on the number of lanes or phases, so one parameter set serves every
intersection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensorkit as tk
from .simcore import LaneObservation
from .tensorkit import ParamStore, Tensor
from .topology import Intersection

ATTENTION = "attention"
MEAN_STATE = "mean_state"
VARIANTS = (ATTENTION, MEAN_STATE)
ATTENDLIGHT_NAME = "attendlight"

#: raw vehicle counts are scaled before embedding. With 0.1 the per-phase
#: vectors differ too little next to the shared embedding bias and training at
#: lr 0.005 drove the action attention into a saturated, uniform policy
FEATURE_SCALE = 0.5


def features(obs, ix: Intersection, dtype=np.float32) -> np.ndarray:
    """``(n_lanes, 4)`` scaled features from an observation dict or raw count array."""
    if isinstance(obs, dict):
        rows = []
        for lane in ix.lanes:
            lo = obs[lane.id]
            rows.append(lo.as_vector() if isinstance(lo, LaneObservation) else list(lo))
        arr = np.array(rows, dtype=float)
    else:
        arr = np.asarray(obs, dtype=float)
    if arr.shape[-1] != 4:
        raise ValueError(f"expected 4 features per lane, got {arr.shape[-1]}")
    return (arr * FEATURE_SCALE).astype(dtype)


@dataclass
class PolicyState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, d: int, dtype=np.float32) -> PolicyState:
        return cls(np.zeros(d, dtype=dtype), np.zeros(d, dtype=dtype))


# -- parameters ------------------------------------------------------------------

def init_actor(d: int = 128, variant: str = ATTENTION, seed: int = 0, dtype=np.float32) -> ParamStore:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    _init_encoder(store, d, variant, rng)
    tk.init_lstm(store, "lstm", d, d, rng)
    store.init_uniform("fc.W", (d, d), d, rng)
    store.init_uniform("fc.b", (d,), d, rng)
    tk.init_attention(store, "action_attn", d, rng)
    return store


def init_critic(d: int = 128, variant: str = ATTENTION, seed: int = 0, dtype=np.float32) -> ParamStore:
    rng = np.random.default_rng(seed + 7919)
    store = ParamStore(dtype)
    _init_encoder(store, d, variant, rng)
    store.init_uniform("head1.W", (d, d), d, rng)
    store.init_uniform("head1.b", (d,), d, rng)
    store.init_uniform("head2.W", (1, d), d, rng)
    store.init_uniform("head2.b", (1,), d, rng)
    return store


def _init_encoder(store: ParamStore, d: int, variant: str, rng) -> None:
    store.init_uniform("embed.W", (d, 4), 4, rng)
    store.init_uniform("embed.b", (d,), 4, rng)
    if variant == ATTENTION:
        tk.init_attention(store, "state_attn", d, rng)


def width(store: ParamStore) -> int:
    return store["embed.W"].shape[0]


def variant_of(store: ParamStore) -> str:
    return ATTENTION if "state_attn.u_a" in store else MEAN_STATE


# -- building blocks -------------------------------------------------------------

def embed_lane(s_l, store: ParamStore) -> Tensor:
    """Shared lane embedding ``g(s_l)``; accepts ``(..., 4)`` feature arrays."""
    s_l = tk.as_tensor(np.asarray(s_l, dtype=store.dtype) if not isinstance(s_l, Tensor) else s_l)
    if s_l.shape[-1] != 4:
        raise ValueError(f"lane features must have 4 entries, got {s_l.shape[-1]}")
    return tk.affine(s_l, store["embed.W"], store["embed.b"])


def phase_representations(x, ix: Intersection, store: ParamStore, variant: str | None = None) -> Tensor:
    """Phase vectors ``z_p`` for all phases; ``x`` is ``(..., n_lanes, 4)``, result ``(..., P, d)``."""
    variant = variant or variant_of(store)
    mask = ix.phase_mask
    if not mask.any(axis=1).all():
        raise ValueError("a phase has no participating lanes")
    g = embed_lane(x, store)                                   # (..., L, d)
    avg = (mask / mask.sum(axis=1, keepdims=True)).astype(store.dtype)
    query = tk.matmul(avg, g)                                  # (..., P, d)
    if variant == MEAN_STATE:
        return query
    refs = tk.expand_dims(g, -3)                               # (..., 1, L, d)
    w = tk.softmax(tk.attention_logits(refs, query, store, "state_attn"), mask)
    return tk.matmul(w, g)


def phase_representation(obs, ix: Intersection, phase: int, store: ParamStore, variant: str | None = None) -> Tensor:
    if not 0 <= phase < ix.n_phases:
        raise IndexError(f"phase {phase} out of range")
    x = obs if isinstance(obs, (np.ndarray, Tensor)) else features(obs, ix, store.dtype)
    return phase_representations(x, ix, store, variant)[..., phase, :]


def _head(z: Tensor, o: Tensor, store: ParamStore) -> Tensor:
    return tk.attention_logits(z, o, store, "action_attn")


def forward(obs, ix: Intersection, pstate: PolicyState, store: ParamStore, active_phase: int = 0):
    """One decision: ``(probabilities over phases, next PolicyState)``.

    ``obs`` is an observation dict or a scaled ``(n_lanes, 4)`` array.
    """
    d = width(store)
    if pstate.h.shape != (d,) or pstate.c.shape != (d,):
        raise ValueError("policy state width does not match the actor")
    x = obs if isinstance(obs, np.ndarray) else features(obs, ix, store.dtype)
    with tk.no_grad():
        z = phase_representations(x, ix, store)
        _, h, c = tk.lstm_cell(z[active_phase], pstate.h, pstate.c, store, "lstm")
        o = tk.relu(tk.affine(h, store["fc.W"], store["fc.b"]))
        probs = tk.softmax(_head(z, o, store)).data
    return probs, PolicyState(h.data, c.data)


def sequence_log_probs(x: np.ndarray, active: np.ndarray, actions: np.ndarray,
                       ix: Intersection, store: ParamStore, full: bool = False):
    """Recorded ``log pi(a_t | s_t)`` for a whole episode, ``x`` of shape ``(T, L, 4)``.

    With ``full`` the whole ``(T, P)`` log-probability table is returned as well.
    """
    T = len(actions)
    d = width(store)
    P = store.params
    z = phase_representations(x, ix, store)                    # (T, P, d)
    steps = np.arange(T)
    x_proj = tk.affine(z[steps, active], P["lstm.W_x"], P["lstm.b"])
    h = c = Tensor(np.zeros(d, dtype=store.dtype))
    hs = []
    for t in range(T):
        _, h, c = tk.lstm_cell(None, h, c, store, "lstm", x_proj=x_proj[t])
        hs.append(h)
    o = tk.relu(tk.affine(tk.stack(hs), P["fc.W"], P["fc.b"]))
    logp = tk.log_softmax(_head(z, o, store))                  # (T, P)
    return (logp[steps, actions], logp) if full else logp[steps, actions]


def sequence_values(x: np.ndarray, ix: Intersection, critic: ParamStore) -> Tensor:
    """Recorded critic values for ``(..., L, 4)`` inputs, shape ``(...)``."""
    z = phase_representations(x, ix, critic)
    pooled = tk.mean(z, axis=-2)
    hidden = tk.relu(tk.affine(pooled, critic["head1.W"], critic["head1.b"]))
    v = tk.affine(hidden, critic["head2.W"], critic["head2.b"])
    return v[..., 0]


def value(obs, ix: Intersection, active_phase: int, critic: ParamStore) -> float:
    """State value; the active phase is accepted for interface symmetry but unused."""
    x = obs if isinstance(obs, np.ndarray) else features(obs, ix, critic.dtype)
    with tk.no_grad():
        return float(sequence_values(x, ix, critic).data)


def select_action(probs, mode: str = "sample", rng: np.random.Generator | None = None) -> int:
    probs = np.asarray(probs, dtype=float)
    if mode == "greedy":
        return int(np.argmax(probs))  # first maximum wins ties
    if mode != "sample":
        raise ValueError(f"unknown mode {mode!r}")
    u = (rng or np.random.default_rng()).random()
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(probs) - 1))


# -- bundle --------------------------------------------------------------------------

class AttendLight:
    """Actor and critic parameters plus the checkpoint format."""

    def __init__(self, d: int = 128, variant: str = ATTENTION, seed: int = 0, dtype=np.float32,
                 actor: ParamStore | None = None, critic: ParamStore | None = None):
        self.d = d
        self.variant = variant
        self.actor = actor if actor is not None else init_actor(d, variant, seed, dtype)
        self.critic = critic if critic is not None else init_critic(d, variant, seed, dtype)

    def initial_state(self) -> PolicyState:
        return PolicyState.zeros(self.d, self.actor.dtype)

    def act(self, x, ix, pstate, active_phase, mode="sample", rng=None):
        probs, pstate = forward(x, ix, pstate, self.actor, active_phase)
        return select_action(probs, mode, rng), probs, pstate

    def copy(self) -> AttendLight:
        return AttendLight.from_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        tensors = tk.params_of([("actor", self.actor), ("critic", self.critic)])
        meta = json.dumps({"d": self.d, "variant": self.variant, "topology_agnostic": True},
                          sort_keys=True).encode()
        return tk.write_checkpoint(tensors, self.d, int(self.variant == MEAN_STATE), meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> AttendLight:
        tensors, d, flags, _meta = tk.read_checkpoint(blob)
        variant = MEAN_STATE if flags & 1 else ATTENTION
        model = cls(d, variant)
        model.actor.load({k[6:]: v for k, v in tensors.items() if k.startswith("actor/")})
        model.critic.load({k[7:]: v for k, v in tensors.items() if k.startswith("critic/")})
        return model

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> AttendLight:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
