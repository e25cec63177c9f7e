"""REINFORCE with a learned baseline over one or many intersection instances."""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import simcore
from . import tensorkit as tk
from .flowgen import FlowTrace
from .policy import AttendLight, features, sequence_log_probs, sequence_values
from .simcore import SimConfig
from .topology import Intersection

SINGLE, MULTI, STOCHASTIC = "single_env", "multi_env", "stochastic_multi_env"

#: default multiplier on pressure rewards before returns are formed, so the critic
#: regresses targets of order one instead of order a thousand
REWARD_SCALE = 0.01
REGIME_ALIASES = {"single": SINGLE, "multi": MULTI, "stochastic": STOCHASTIC}


class TrainError(ValueError):
    pass


class SimEnv:
    """Episode adapter between :mod:`simcore` and the learner."""

    def __init__(self, ix: Intersection, flow: FlowTrace, cfg: SimConfig | None = None, seed: int = 0):
        self.ix = ix
        self.state = simcore.reset(ix, flow, cfg or SimConfig(), seed)

    @property
    def active_phase(self) -> int:
        return self.state.signal.active_phase

    @property
    def done(self) -> bool:
        return self.state.done

    def observe(self) -> np.ndarray:
        return self.state.observe_array()

    def step(self, action: int) -> float:
        simcore.advance(self.state, action)
        return -simcore.pressure(self.state)

    def att(self) -> float:
        return simcore.episode_att(self.state)


@dataclass(frozen=True)
class EnvInstance:
    """One training/evaluation case: a topology and its demand."""

    ix: Intersection
    flow: FlowTrace
    cfg: SimConfig = field(default_factory=SimConfig)
    name: str = ""

    def make(self, seed: int) -> SimEnv:
        return SimEnv(self.ix, self.flow, self.cfg, seed)


class BanditEnv:
    """One-decision episode: choosing phase ``a`` pays ``payoffs[a]``.

    The observation is a fixed random count matrix so that phases see
    different lane sets and the policy can tell them apart.
    """

    def __init__(self, ix: Intersection, payoffs, obs: np.ndarray):
        self.ix = ix
        self.payoffs = np.asarray(payoffs, dtype=float)
        self.obs = obs
        self.active_phase = 0
        self.done = False

    def observe(self) -> np.ndarray:
        return self.obs

    def step(self, action: int) -> float:
        self.done = True
        return float(self.payoffs[action])


@dataclass(frozen=True)
class BanditInstance:
    ix: Intersection
    payoffs: tuple = (1.0, 0.0)
    obs_seed: int = 0

    def make(self, seed: int) -> BanditEnv:
        if len(self.payoffs) != self.ix.n_phases:
            raise TrainError("one payoff per phase required")
        obs = np.random.default_rng(self.obs_seed).integers(0, 10, size=(len(self.ix.lanes), 4))
        return BanditEnv(self.ix, self.payoffs, obs.astype(float))


@dataclass
class Trajectory:
    ix: Intersection
    obs: np.ndarray          # (T, L, 4) scaled features seen at each decision
    active: np.ndarray       # (T,) green phase during the interval before the decision
    actions: np.ndarray      # (T,)
    log_probs: np.ndarray    # (T,) at sampling time
    rewards: np.ndarray      # (T,) -pressure after each interval
    att: float = float("nan")

    def __len__(self) -> int:
        return len(self.actions)


def rollout(env, model: AttendLight, rng: np.random.Generator, mode: str = "sample") -> Trajectory:
    """Play one full episode with the current actor."""
    ix = env.ix
    dtype = model.actor.dtype
    pstate = model.initial_state()
    obs, active, actions, logps, rewards = [], [], [], [], []
    while not env.done:
        x = features(env.observe(), ix, dtype)
        a_prev = env.active_phase
        a, probs, pstate = model.act(x, ix, pstate, a_prev, mode, rng)
        obs.append(x)
        active.append(a_prev)
        actions.append(a)
        logps.append(np.log(max(probs[a], 1e-30)))
        rewards.append(env.step(a))
    att = env.att() if hasattr(env, "att") else float("nan")
    return Trajectory(
        ix, np.stack(obs), np.array(active), np.array(actions),
        np.array(logps), np.array(rewards, dtype=float), att,
    )


def returns(rewards) -> np.ndarray:
    """Undiscounted reward-to-go ``R_t = sum_{t' >= t} r_t'``."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise TrainError("returns of an empty episode")
    return np.cumsum(r[::-1])[::-1].copy()


def reinforce_update(trajs: list[Trajectory], model: AttendLight, lr: float,
                     entropy_coef: float = 0.0, max_grad_norm: float | None = None,
                     reward_scale: float = REWARD_SCALE) -> dict:
    """One actor step on ``-(R - V) log pi`` and one critic step on ``(R - V)^2``.

    Each trajectory is averaged over its own length, then over the batch. The
    baseline enters the actor loss as a constant. ``entropy_coef`` adds a bonus
    on the mean policy entropy and ``max_grad_norm`` clips each store's global
    gradient norm; both are off by default. Rewards are multiplied by
    ``reward_scale`` first.
    """
    if not trajs:
        raise TrainError("empty batch")
    actor, critic = model.actor, model.critic
    n = len(trajs)
    actor_loss = critic_loss = None
    adv_abs = 0.0
    for tr in trajs:
        R = (returns(tr.rewards) * reward_scale).astype(actor.dtype)
        v = sequence_values(tr.obs, tr.ix, critic)
        adv = R - v.data
        adv_abs += float(np.abs(adv).mean())
        logp, table = sequence_log_probs(tr.obs, tr.active, tr.actions, tr.ix, actor, full=True)
        scale = 1.0 / (n * len(tr))
        a_term = tk.sum(tk.mul(logp, -scale * adv))
        if entropy_coef:
            # minimising sum p log p maximises the entropy
            a_term = tk.add(a_term, tk.mul(tk.sum(tk.mul(tk.exp(table), table)), entropy_coef * scale))
        c_term = tk.mul(tk.sum(tk.square(tk.sub(R, v))), scale)
        actor_loss = a_term if actor_loss is None else tk.add(actor_loss, a_term)
        critic_loss = c_term if critic_loss is None else tk.add(critic_loss, c_term)
    actor.zero_grad()
    critic.zero_grad()
    tk.backward(actor_loss)
    tk.backward(critic_loss)
    norms = (tk.clip_grad_norm(actor, max_grad_norm or 0.0), tk.clip_grad_norm(critic, max_grad_norm or 0.0))
    tk.adam_step(actor, lr)
    tk.adam_step(critic, lr)
    return {"critic_loss": float(critic_loss.data), "mean_abs_adv": adv_abs / n,
            "actor_grad_norm": norms[0], "critic_grad_norm": norms[1]}


# -- regimes -------------------------------------------------------------------------

@dataclass
class RegimeConfig:
    regime: str = SINGLE
    n: int | None = None
    episodes: int = 100
    lr: float | None = None
    d: int | None = None
    seed: int = 0
    variant: str = "attention"
    strict_deterministic: bool = True
    reward_scale: float = REWARD_SCALE
    entropy_coef: float = 0.0
    max_grad_norm: float | None = None
    #: every this many iterations score the greedy policy on validation instances
    #: and keep the best snapshot; 0 keeps the final parameters
    select_every: int = 0

    def __post_init__(self):
        self.regime = REGIME_ALIASES.get(self.regime, self.regime)
        if self.regime not in (SINGLE, MULTI, STOCHASTIC):
            raise TrainError(f"unknown regime {self.regime!r}")
        single = self.regime == SINGLE
        if self.lr is None:
            self.lr = 0.005 if single else 0.0005
        if self.d is None:
            self.d = 128 if single else 256
        if self.n is None and self.regime != MULTI:
            self.n = 3 if single else 5
        if self.n is not None and self.n < 1:
            raise TrainError("n must be at least 1")
        if not self.lr > 0:
            raise TrainError("lr must be positive")
        if not self.reward_scale > 0:
            raise TrainError("reward_scale must be positive")
        if self.entropy_coef < 0 or (self.max_grad_norm is not None and not self.max_grad_norm > 0):
            raise TrainError("entropy_coef must be >= 0 and max_grad_norm > 0")
        if self.select_every < 0:
            raise TrainError("select_every must be >= 0")


@dataclass
class TrainReport:
    iterations: list[int] = field(default_factory=list)
    mean_return: list[float] = field(default_factory=list)
    mean_att: list[float] = field(default_factory=list)
    wallclock_s: list[float] = field(default_factory=list)
    checkpoint_id: str = ""
    #: (iteration count, mean greedy validation ATT) at every selection check
    validation: list[tuple[int, float]] = field(default_factory=list)
    selected: int | None = None

    def to_csv(self) -> str:
        lines = ["iteration,mean_return,mean_att,wallclock_s"]
        for row in zip(self.iterations, self.mean_return, self.mean_att, self.wallclock_s):
            lines.append(f"{row[0]},{row[1]:.6f},{row[2]:.6f},{row[3]:.3f}")
        return "\n".join(lines) + "\n"


def _worker_rollout(args):
    blob, env, sim_seed, act_seed = args
    model = AttendLight.from_bytes(blob)
    return rollout(env.make(sim_seed), model, np.random.default_rng(act_seed))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ATTENDLIGHT_THREADS", "1")))
    except ValueError:
        return 1


def _pick_envs(cfg: RegimeConfig, envs: list[EnvInstance], rng) -> list[EnvInstance]:
    if cfg.regime == SINGLE:
        return [envs[0]] * cfg.n
    if cfg.regime == MULTI:
        if cfg.n is None or cfg.n >= len(envs):
            return list(envs)
        return [envs[i] for i in sorted(rng.choice(len(envs), cfg.n, replace=False))]
    return [envs[i] for i in rng.choice(len(envs), cfg.n, replace=False)]


def _check_envs(cfg: RegimeConfig, envs) -> None:
    if not envs:
        raise TrainError("no environments")
    if cfg.regime == SINGLE and len(envs) != 1:
        raise TrainError("single_env regime takes exactly one environment instance")
    if cfg.regime == STOCHASTIC and cfg.n > len(envs):
        raise TrainError(f"cannot sample {cfg.n} of {len(envs)} environments without replacement")


def train_model(model: AttendLight, cfg: RegimeConfig, envs: list[EnvInstance],
                log_every: int = 0, report: TrainReport | None = None,
                validation: list[EnvInstance] | None = None) -> TrainReport:
    """Train ``model`` in place for ``cfg.episodes`` iterations.

    With ``cfg.select_every`` the parameters that scored the lowest greedy ATT on
    ``validation`` (the training instances when omitted) are restored at the end.
    """
    _check_envs(cfg, envs)
    validation = list(validation or envs)
    best: tuple[float, AttendLight] | None = None
    rng = np.random.default_rng(cfg.seed)
    report = report or TrainReport()
    workers = 1 if cfg.strict_deterministic else _threads()
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    start = time.perf_counter()
    try:
        for it in range(cfg.episodes):
            batch = _pick_envs(cfg, envs, rng)
            seeds = rng.integers(0, 2**31 - 1, size=(len(batch), 2))
            if pool is None:
                trajs = [rollout(env.make(int(s0)), model, np.random.default_rng(int(s1)))
                         for env, (s0, s1) in zip(batch, seeds)]
            else:
                blob = model.to_bytes()
                trajs = list(pool.map(_worker_rollout,
                                      [(blob, env, int(s0), int(s1)) for env, (s0, s1) in zip(batch, seeds)]))
            reinforce_update(trajs, model, cfg.lr, cfg.entropy_coef, cfg.max_grad_norm, cfg.reward_scale)
            report.iterations.append(len(report.iterations))
            report.mean_return.append(float(np.mean([t.rewards.sum() for t in trajs])))
            report.mean_att.append(float(np.mean([t.att for t in trajs])))
            report.wallclock_s.append(0.0 if cfg.strict_deterministic else time.perf_counter() - start)
            if log_every and (it + 1) % log_every == 0:
                tail = slice(-log_every, None)
                print(f"[train] it {it + 1}: return {np.mean(report.mean_return[tail]):.1f} "
                      f"att {np.mean(report.mean_att[tail]):.2f} "
                      f"({time.perf_counter() - start:.0f}s)", flush=True)
            if cfg.select_every and ((it + 1) % cfg.select_every == 0 or it + 1 == cfg.episodes):
                score = float(np.mean([evaluate(model, env) for env in validation]))
                report.validation.append((it + 1, score))
                if best is None or score < best[0]:
                    best = (score, model.copy())
                    report.selected = it + 1
    finally:
        if pool is not None:
            pool.shutdown()
    if best is not None:
        model.actor, model.critic = best[1].actor, best[1].critic
    return report


def train(cfg: RegimeConfig, envs: list[EnvInstance], log_every: int = 0,
          validation: list[EnvInstance] | None = None) -> tuple[AttendLight, TrainReport]:
    _check_envs(cfg, envs)
    model = AttendLight(cfg.d, cfg.variant, seed=cfg.seed)
    report = train_model(model, cfg, envs, log_every, validation=validation)
    report.checkpoint_id = checkpoint_id(model)
    return model, report


def finetune(model: AttendLight, env: EnvInstance, episodes: int, lr: float = 0.0005,
             n: int = 3, seed: int = 0, log_every: int = 0) -> AttendLight:
    """Continue training a copy of ``model`` on a single instance; the network is unchanged."""
    tuned = model.copy()
    if episodes > 0:
        cfg = RegimeConfig(SINGLE, n=n, episodes=episodes, lr=lr, d=model.d, seed=seed, variant=model.variant)
        train_model(tuned, cfg, [env], log_every)
    return tuned


def checkpoint_id(model: AttendLight) -> str:
    import hashlib
    return hashlib.sha256(model.to_bytes()).hexdigest()[:16]


# -- evaluation ------------------------------------------------------------------------

class PolicyController:
    """Adapts a trained model to the controller interface used by the baselines."""

    def __init__(self, model: AttendLight, mode: str = "greedy", seed: int = 0):
        self.model = model
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self.pstate = None

    def reset(self) -> None:
        self.pstate = self.model.initial_state()

    def decide(self, state: simcore.SimState) -> int:
        x = features(state.observe_array(), state.ix, self.model.actor.dtype)
        a, _, self.pstate = self.model.act(x, state.ix, self.pstate, state.signal.active_phase,
                                           self.mode, self.rng)
        return a


def run_episode(controller, env: EnvInstance, seed: int = 0, trace: bool = False):
    """Drive one episode with ``controller``; returns ``(att, SimState)``."""
    state = simcore.reset(env.ix, env.flow, env.cfg, seed)
    if trace:
        state.enable_trace()
    controller.reset()
    while not state.done:
        simcore.advance(state, controller.decide(state))
    return simcore.episode_att(state), state


def evaluate(model: AttendLight, env: EnvInstance, seeds=(0,), mode: str = "greedy") -> float:
    """Mean ATT of full episodes, one per simulator seed."""
    atts = [run_episode(PolicyController(model, mode, seed), env, seed)[0] for seed in seeds]
    return float(np.mean(atts))
