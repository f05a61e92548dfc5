"""Reward, rollout collection, GAE, PPO updates and the inference loop for the guidance controller."""

import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from ..models import ActorKind, IterationLog, PPOConfig, RewardConfig, RunConfig
from . import diffcore, metrics
from .diffcore import AdamState
from .diffusion import (
    GUIDANCE_MAX,
    GUIDANCE_MIN,
    N_CLASSES,
    Denoiser,
    NoiseSchedule,
    ProxyClassifier,
    build_state,
    cfg_combine,
    classify,
    clip_guidance,
    ddim_step,
    predict_x0,
)
from .policy import (
    ACTION_HIGH,
    ACTION_LOW,
    Actor,
    Critic,
    actor_backward,
    actor_forward,
    actor_forward_with_tape,
    build_actor,
    build_critic,
    critic_backward,
    critic_forward,
    critic_forward_with_tape,
    entropy,
    log_prob,
    mean_action,
    reparameterize,
)
from .qsim import N_FEATURES

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Reward
# ---------------------------------------------------------------------------

def compute_reward(x0_t, x0_prev, action: float, label: int, clf: ProxyClassifier, config: RewardConfig) -> float:
    """alpha * p(label | x0_t) + beta * SSIM(x0_t, x0_prev) - lambda_act * a^2 - lambda_tv * TV(x0_t)."""
    x0_t = np.asarray(x0_t, dtype=np.float64)
    r_cls = float(classify(clf, x0_t)[label])
    r_step = 0.0
    if x0_prev is not None and config.beta:
        side = math.isqrt(x0_t.size)
        r_step = metrics.ssim(x0_t.reshape(side, side), np.asarray(x0_prev).reshape(side, side))
    tv_term = metrics.tv(x0_t) if config.lambda_tv else 0.0
    return config.alpha * r_cls + config.beta * r_step - config.lambda_act * action * action - config.lambda_tv * tv_term


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    reward: float
    done: bool
    guidance: float
    next_state: Optional[np.ndarray]


class Environment(Protocol):
    t_sample: int
    cfg0: float

    def reset(self) -> np.ndarray: ...

    def step(self, action: float, guidance: Optional[float] = None) -> StepResult: ...

    def reseed(self, seed: int): ...


class GuidanceEnv:
    """One guided DDIM trajectory per episode; the controller picks the guidance offset at every step."""

    def __init__(
        self,
        denoiser: Denoiser,
        classifier: ProxyClassifier,
        schedule: NoiseSchedule,
        reward_config: RewardConfig,
        cfg0: float,
        rng: np.random.Generator,
    ):
        self.denoiser = denoiser
        self.classifier = classifier
        self.schedule = schedule
        self.reward_config = reward_config
        self.cfg0 = cfg0
        self.rng = rng
        self.timesteps = schedule.timesteps
        self.label = 0
        self.z: Optional[np.ndarray] = None
        self.k = 0
        self._eps_hat = None
        self._a_prev = 0.0
        self._prev_x0 = None

    @property
    def t_sample(self) -> int:
        return self.schedule.t_sample

    def reseed(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def reset(self, label: Optional[int] = None, z: Optional[np.ndarray] = None) -> np.ndarray:
        self.label = int(self.rng.integers(N_CLASSES)) if label is None else int(label)
        self.z = self.rng.standard_normal(self.denoiser.pixels) if z is None else np.asarray(z, dtype=np.float64).ravel()
        self.k = 0
        self._a_prev = 0.0
        self._prev_x0 = None
        self._eps_hat, _ = self.denoiser.predict_pair(self.z, int(self.timesteps[0]), self.label)
        return self._state()

    def _state(self) -> np.ndarray:
        t = int(self.timesteps[self.k])
        x0 = predict_x0(self.schedule, self.z, self._eps_hat, t)
        p_label = float(classify(self.classifier, x0)[self.label])
        return build_state(self.k + 1, self.t_sample, self.z, self._eps_hat, self._a_prev, p_label)

    def step(self, action: float, guidance: Optional[float] = None) -> StepResult:
        if self.z is None or self.k >= self.t_sample:
            raise ValueError("step() called on a finished episode; call reset() first")
        g = clip_guidance(self.cfg0, action) if guidance is None else float(guidance)
        t, t_prev = int(self.timesteps[self.k]), int(self.timesteps[self.k + 1])

        eps_uncond, eps_cond = self.denoiser.predict_pair(self.z, t, self.label)
        eps_hat = cfg_combine(eps_uncond, eps_cond, g)
        x0 = predict_x0(self.schedule, self.z, eps_hat, t)
        reward = compute_reward(x0, self._prev_x0, action, self.label, self.classifier, self.reward_config)

        self.z = ddim_step(self.schedule, self.z, eps_hat, t, t_prev)
        self._eps_hat = eps_hat
        self._a_prev = float(action)
        self._prev_x0 = x0
        self.k += 1
        done = self.k == self.t_sample
        return StepResult(reward, done, g, None if done else self._state())

    @property
    def image(self) -> np.ndarray:
        """Current latent as a square image; the final sample once the episode is done."""
        side = self.denoiser.image_size
        return self.z.reshape(side, side)


class TargetGuidanceEnv:
    """Diagnostic task: reward -(g - g*)^2 for a hidden target g*, same interface as GuidanceEnv."""

    def __init__(self, g_star: float, cfg0: float, t_sample: int, rng: np.random.Generator):
        self.g_star = g_star
        self.cfg0 = cfg0
        self.t_sample = t_sample
        self.rng = rng
        self.k = 0
        self._a_prev = 0.0

    def reseed(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def reset(self) -> np.ndarray:
        self.k = 0
        self._a_prev = 0.0
        return self._state()

    def _state(self) -> np.ndarray:
        state = np.zeros(N_FEATURES)
        state[0] = (self.k + 1) / self.t_sample
        state[4] = self._a_prev
        return state

    def step(self, action: float, guidance: Optional[float] = None) -> StepResult:
        if self.k >= self.t_sample:
            raise ValueError("step() called on a finished episode; call reset() first")
        g = clip_guidance(self.cfg0, action) if guidance is None else float(guidance)
        reward = -(g - self.g_star) ** 2
        self._a_prev = float(action)
        self.k += 1
        done = self.k == self.t_sample
        return StepResult(reward, done, g, None if done else self._state())


# ---------------------------------------------------------------------------
# Advantages
# ---------------------------------------------------------------------------

def gae(rewards, values, bootstrap: float, dones, gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over one env's trajectory; returns (advantages, returns)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not rewards.shape == values.shape == dones.shape or rewards.ndim != 1:
        raise ValueError(
            f"gae inputs must be equal-length 1-D arrays, got {rewards.shape}, {values.shape}, {dones.shape}"
        )
    n = len(rewards)
    advantages = np.zeros(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        next_value = values[t + 1] if t + 1 < n else bootstrap
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        acc = delta + gamma * lam * live * acc
        advantages[t] = acc
    return advantages, advantages + values


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    advantages = np.asarray(advantages, dtype=np.float64)
    centred = advantages - advantages.mean()
    std = centred.std()
    return centred / std if std > 0 else centred


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

@dataclass
class Transition:
    state: np.ndarray
    action: float
    raw_action: float
    reward: float
    log_prob: float
    value: float
    done: bool
    guidance: float


@dataclass
class RolloutBuffer:
    """(n_envs, horizon) arrays of transitions plus per-env bootstrap values."""
    states: np.ndarray
    actions: np.ndarray
    raw_actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    guidances: np.ndarray
    bootstrap: np.ndarray
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    @classmethod
    def stack(cls, trajectories: Sequence[Tuple[List[Transition], float]]) -> "RolloutBuffer":
        def column(name, dtype=np.float64):
            return np.array([[getattr(tr, name) for tr in steps] for steps, _ in trajectories], dtype=dtype)

        return cls(
            states=column("state"),
            actions=column("action"),
            raw_actions=column("raw_action"),
            rewards=column("reward"),
            log_probs=column("log_prob"),
            values=column("value"),
            dones=column("done", bool),
            guidances=column("guidance"),
            bootstrap=np.array([b for _, b in trajectories], dtype=np.float64),
        )

    @property
    def n_envs(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    @property
    def n_samples(self) -> int:
        return self.rewards.size

    def transition(self, env: int, step: int) -> Transition:
        return Transition(
            self.states[env, step], float(self.actions[env, step]), float(self.raw_actions[env, step]),
            float(self.rewards[env, step]), float(self.log_probs[env, step]), float(self.values[env, step]),
            bool(self.dones[env, step]), float(self.guidances[env, step]),
        )

    def compute_advantages(self, gamma: float, lam: float, normalize: bool = True):
        advantages = np.zeros_like(self.rewards)
        returns = np.zeros_like(self.rewards)
        for i in range(self.n_envs):
            advantages[i], returns[i] = gae(self.rewards[i], self.values[i], self.bootstrap[i], self.dones[i], gamma, lam)
        self.advantages = normalize_advantages(advantages.ravel()).reshape(advantages.shape) if normalize else advantages
        self.returns = returns
        return self


def _run_env(env, actor: Actor, critic: Critic, horizon: int, rng: np.random.Generator, env_index: int):
    steps: List[Transition] = []
    state = env.reset()
    for t in range(horizon):
        out = actor_forward(actor, state)
        raw = float(reparameterize(out, rng.standard_normal()))
        action = float(np.clip(raw, ACTION_LOW, ACTION_HIGH))
        logp = float(log_prob(out, raw))
        value = critic_forward(critic, state)
        result = env.step(action)
        if not math.isfinite(result.reward):
            raise FloatingPointError(f"non-finite reward in env {env_index} at step {t}")
        steps.append(Transition(state, action, raw, result.reward, logp, value, result.done, result.guidance))
        state = env.reset() if result.done else result.next_state
        if not np.all(np.isfinite(state)):
            raise FloatingPointError(f"non-finite state in env {env_index} at step {t}")
    return steps, critic_forward(critic, state)


def collect_rollouts(
    envs: Sequence,
    actor: Actor,
    critic: Critic,
    horizon: int,
    rngs: Sequence[np.random.Generator],
    workers: int = 1,
) -> RolloutBuffer:
    """Run every env for ``horizon`` steps, auto-resetting at episode ends.

    Envs run independently with their own generators and are merged in env order, so any
    worker count yields the same buffer.
    """
    if len(envs) != len(rngs):
        raise ValueError(f"{len(envs)} envs but {len(rngs)} action generators")

    def run(i):
        return _run_env(envs[i], actor, critic, horizon, rngs[i], i)

    if workers <= 1:
        trajectories = [run(i) for i in range(len(envs))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trajectories = list(pool.map(run, range(len(envs))))
    return RolloutBuffer.stack(trajectories)


# ---------------------------------------------------------------------------
# PPO
# ---------------------------------------------------------------------------

def clipped_surrogate(ratio, advantages, clip_eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample (unclipped, clipped) surrogate terms; the PPO objective is their elementwise minimum."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    unclipped = ratio * advantages
    clipped = np.minimum(unclipped, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages)
    return unclipped, clipped


@dataclass
class UpdateStats:
    actor_loss: float = 0.0
    critic_loss: float = 0.0
    entropy: float = 0.0
    clip_fraction: float = 0.0
    approx_kl: float = 0.0
    minibatches: int = 0

    def add(self, actor_loss, critic_loss, ent, clip_fraction, approx_kl):
        self.actor_loss += actor_loss
        self.critic_loss += critic_loss
        self.entropy += ent
        self.clip_fraction += clip_fraction
        self.approx_kl += approx_kl
        self.minibatches += 1

    def mean(self) -> "UpdateStats":
        n = max(self.minibatches, 1)
        return UpdateStats(
            self.actor_loss / n, self.critic_loss / n, self.entropy / n,
            self.clip_fraction / n, self.approx_kl / n, self.minibatches,
        )


def ppo_update(
    buffer: RolloutBuffer,
    actor: Actor,
    critic: Critic,
    config: PPOConfig,
    actor_opt: AdamState,
    critic_opt: AdamState,
    rng: np.random.Generator,
) -> UpdateStats:
    """K epochs of shuffled minibatch updates of the clipped surrogate and the value regression."""
    if buffer.advantages is None:
        raise ValueError("compute advantages before calling ppo_update")

    states = buffer.states.reshape(-1, N_FEATURES)
    raw_actions = buffer.raw_actions.ravel()
    old_log_probs = buffer.log_probs.ravel()
    advantages = buffer.advantages.ravel()
    returns = buffer.returns.ravel()
    eps = config.clip_eps
    stats = UpdateStats()

    for epoch in range(config.epochs):
        order = rng.permutation(buffer.n_samples)
        for mb, start in enumerate(range(0, buffer.n_samples, config.minibatch)):
            idx = order[start:start + config.minibatch]
            b = len(idx)
            s, adv = states[idx], advantages[idx]

            out, tape = actor_forward_with_tape(actor, s)
            new_log_probs = log_prob(out, raw_actions[idx])
            ratio = np.exp(new_log_probs - old_log_probs[idx])
            unclipped, objective = clipped_surrogate(ratio, adv, eps)
            ent = entropy(out)
            actor_loss = float(-np.mean(objective) - config.entropy_coef * np.mean(ent))

            values, critic_tape = critic_forward_with_tape(critic, s)
            value_err = values - returns[idx]
            critic_loss = float(config.value_coef * np.mean(value_err * value_err))
            if not (math.isfinite(actor_loss) and math.isfinite(critic_loss)):
                raise FloatingPointError(f"non-finite PPO loss at epoch {epoch}, minibatch {mb}")

            # Gradient flows through the ratio only where the unclipped term is the minimum.
            active = unclipped <= objective
            coef = -(ratio * adv * active) / b
            var = np.exp(2.0 * out.log_std)
            diff = raw_actions[idx] - out.mu
            d_mu = coef * diff / var
            d_log_std = coef * (diff * diff / var - 1.0) - config.entropy_coef / b
            actor_grads = actor_backward(actor, tape, d_mu, d_log_std)
            diffcore.clip_grad_norm(actor_grads, config.max_grad_norm)
            params, _ = diffcore.adam_step(actor.parameters(), actor_grads, actor_opt)
            actor.set_parameters(params)

            critic_grads = critic_backward(critic, critic_tape, 2.0 * config.value_coef * value_err / b)
            diffcore.clip_grad_norm(critic_grads, config.max_grad_norm)
            params, _ = diffcore.adam_step(critic.parameters(), critic_grads, critic_opt)
            critic.set_parameters(params)

            stats.add(
                actor_loss,
                critic_loss,
                float(np.mean(ent)),
                float(np.mean(np.abs(ratio - 1.0) > eps)),
                float(np.mean(old_log_probs[idx] - new_log_probs)),
            )
    return stats.mean()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainingResult:
    actor: Actor
    critic: Critic
    log: List[IterationLog] = field(default_factory=list)
    best_actor: Optional[Actor] = None
    best_critic: Optional[Critic] = None
    best_reward: float = -math.inf


EnvFactory = Callable[[int, np.random.Generator], Environment]


def run_training(
    config: RunConfig,
    env_factory: EnvFactory,
    seed: Optional[int] = None,
    progress: bool = True,
    on_iteration: Optional[Callable[[int, RolloutBuffer, UpdateStats], None]] = None,
) -> TrainingResult:
    """collect_rollouts -> GAE -> ppo_update for ``config.ppo.iterations`` iterations.

    ``env_factory(i, rng)`` builds env ``i``. The best-by-mean-reward actor and critic are kept
    as copies on the result.
    """
    if not config.actor.is_learned:
        raise ValueError(f"actor kind {config.actor.value!r} has nothing to train")
    ppo = config.ppo
    root = np.random.SeedSequence(config.seed if seed is None else seed)
    init_seq, update_seq, env_seq, action_seq = root.spawn(4)

    init_rng = np.random.default_rng(init_seq)
    actor = build_actor(config.actor, config.controller, config.vqc, init_rng)
    critic = build_critic(config.controller, init_rng)
    actor_opt = AdamState.for_params(actor.parameters(), ppo.actor_lr)
    critic_opt = AdamState.for_params(critic.parameters(), ppo.critic_lr)
    update_rng = np.random.default_rng(update_seq)

    envs = [env_factory(i, np.random.default_rng(s)) for i, s in enumerate(env_seq.spawn(ppo.n_envs))]
    action_rngs = [np.random.default_rng(s) for s in action_seq.spawn(ppo.n_envs)]
    result = TrainingResult(actor, critic)

    logger.info(
        "Training %s controller: %d params, %d iterations of %d envs x %d steps",
        config.actor.value, actor.param_count(), ppo.iterations, ppo.n_envs, ppo.horizon,
    )
    bar = tqdm(range(ppo.iterations), desc=f"ppo[{config.actor.value}]", disable=not progress)
    for iteration in bar:
        buffer = collect_rollouts(envs, actor, critic, ppo.horizon, action_rngs, config.workers)
        buffer.compute_advantages(ppo.gamma, ppo.gae_lambda)
        stats = ppo_update(buffer, actor, critic, ppo, actor_opt, critic_opt, update_rng)

        row = IterationLog(
            iteration=iteration,
            mean_reward=float(buffer.rewards.mean()),
            actor_loss=stats.actor_loss,
            critic_loss=stats.critic_loss,
            clip_fraction=stats.clip_fraction,
            mean_abs_action=float(np.abs(buffer.actions).mean()),
            mean_guidance=float(buffer.guidances.mean()),
        )
        result.log.append(row)
        if row.mean_reward > result.best_reward:
            result.best_reward = row.mean_reward
            result.best_actor = copy.deepcopy(actor)
            result.best_critic = copy.deepcopy(critic)
        bar.set_postfix(reward=f"{row.mean_reward:.4f}", g=f"{row.mean_guidance:.2f}")
        logger.debug("iteration %d: %s", iteration, row.model_dump())
        if on_iteration is not None:
            on_iteration(iteration, buffer, stats)

    logger.info("Training finished: best mean reward %.4f", result.best_reward)
    return result


# ---------------------------------------------------------------------------
# Controllers, schedules and inference
# ---------------------------------------------------------------------------

def constant_schedule(cfg0: float) -> Callable[[int], float]:
    return lambda k: cfg0


def linear_schedule(cfg_max: float, cfg_min: float, t_sample: int) -> Callable[[int], float]:
    """Anneal linearly from cfg_max at the first step to cfg_min at the last."""
    span = max(t_sample - 1, 1)
    return lambda k: cfg_max + (cfg_min - cfg_max) * k / span


def cosine_schedule(cfg_max: float, cfg_min: float, t_sample: int) -> Callable[[int], float]:
    span = max(t_sample - 1, 1)
    return lambda k: cfg_min + 0.5 * (cfg_max - cfg_min) * (1.0 + math.cos(math.pi * k / span))


class PolicyController:
    """Deterministic mean action of a trained actor."""

    def __init__(self, actor: Actor):
        self.actor = actor

    def act(self, state: np.ndarray, k: int) -> Tuple[float, Optional[float]]:
        return float(mean_action(actor_forward(self.actor, state))), None

    def param_count(self) -> int:
        return self.actor.param_count()


class ScheduleController:
    """Guidance taken from a fixed schedule; the reported action is its offset from cfg0."""

    def __init__(self, schedule: Callable[[int], float], cfg0: float):
        self.schedule = schedule
        self.cfg0 = cfg0

    def act(self, state: np.ndarray, k: int) -> Tuple[float, Optional[float]]:
        g = float(np.clip(self.schedule(k), GUIDANCE_MIN, GUIDANCE_MAX))
        return float(np.clip(g - self.cfg0, ACTION_LOW, ACTION_HIGH)), g

    def param_count(self) -> int:
        return 0


def build_controller(kind: ActorKind, config: RunConfig, actor: Optional[Actor] = None):
    if kind.is_learned:
        if actor is None:
            raise ValueError(f"actor kind {kind.value!r} needs a trained actor")
        return PolicyController(actor)
    t_sample = config.schedule.t_sample
    ctrl = config.controller
    if kind == ActorKind.FIXED:
        return ScheduleController(constant_schedule(config.cfg0), config.cfg0)
    if kind == ActorKind.LINEAR:
        return ScheduleController(linear_schedule(ctrl.cfg_max, ctrl.cfg_min, t_sample), config.cfg0)
    return ScheduleController(cosine_schedule(ctrl.cfg_max, ctrl.cfg_min, t_sample), config.cfg0)


@dataclass
class InferenceResult:
    image: np.ndarray
    trace: List[Dict[str, float]]
    episode_reward: float


def run_episode(controller, env, state: np.ndarray) -> Tuple[List[Dict[str, float]], float]:
    trace, total = [], 0.0
    for k in range(env.t_sample):
        action, guidance = controller.act(state, k)
        result = env.step(action, guidance)
        total += result.reward
        t = int(env.timesteps[k]) if hasattr(env, "timesteps") else env.t_sample - k
        trace.append({"step": k, "t": t, "guidance": result.guidance, "action": action})
        if result.done:
            break
        state = result.next_state
    return trace, total


def run_inference(controller, env: GuidanceEnv, label: int, seed: int) -> InferenceResult:
    """Sample one image of class ``label`` from the latent drawn with ``seed``, no action noise."""
    z = np.random.default_rng(seed).standard_normal(env.denoiser.pixels)
    state = env.reset(label=label, z=z)
    trace, total = run_episode(controller, env, state)
    return InferenceResult(env.image.copy(), trace, total)


def evaluate_episodic_reward(controller, env, episodes: int, seed: int) -> Tuple[float, float]:
    """Mean and std of undiscounted episode returns under deterministic actions."""
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    env.reseed(seed)
    returns = []
    for _ in range(episodes):
        _, total = run_episode(controller, env, env.reset())
        returns.append(total)
    return metrics.mean_std(returns)
