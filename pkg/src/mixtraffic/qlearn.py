"""Dense Q-network, epsilon-greedy control, experience replay and the DQN loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .sim import N_ACTIONS, ObservationSpec, World, observe_many, step

log = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    """Raised when the TD loss stops being finite."""

    def __init__(self, message, curve=None):
        super().__init__(message)
        self.curve = curve or []


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_layers: int
    num_neurons: int
    output_dim: int = N_ACTIONS

    def __post_init__(self):
        if self.output_dim != N_ACTIONS:
            raise ValueError(f"output_dim must be {N_ACTIONS}")
        if self.input_dim < 1 or self.num_neurons < 1 or self.hidden_layers < 0:
            raise ValueError("network dimensions must be positive")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.num_neurons] * self.hidden_layers + [self.output_dim]


@dataclass
class QNetwork:
    spec: NetSpec
    weights: list[np.ndarray]  # (fan_in, fan_out) per layer
    biases: list[np.ndarray]
    seed: int = 0
    vel_w: list[np.ndarray] = field(default_factory=list, repr=False)
    vel_b: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.vel_w:
            self.vel_w = [np.zeros_like(w) for w in self.weights]
            self.vel_b = [np.zeros_like(b) for b in self.biases]

    def copy(self) -> "QNetwork":
        return QNetwork(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.seed,
            [v.copy() for v in self.vel_w],
            [v.copy() for v in self.vel_b],
        )

    def params_bytes(self) -> bytes:
        return b"".join(a.tobytes() for pair in zip(self.weights, self.biases) for a in pair)


def init_network(spec: NetSpec, seed: int) -> QNetwork:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    sizes = spec.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return QNetwork(spec, weights, biases, seed)


@dataclass(frozen=True)
class TrainSchedule:
    train_iterations: int = 100_000
    learning_rate: float = 0.00017
    momentum: float = 0.57
    batch_size: int = 53
    l2_decay: float = 0.01
    gamma: float = 0.9
    experience_size: int = 5000
    start_learn_threshold: int = 500
    learning_steps_total: int = 54129
    learning_steps_burnin: int = 1083
    epsilon_min: float = 0.86
    epsilon_test_time: float = 0.22
    target_update_period: int = 0

    def __post_init__(self):
        if not 0 <= self.learning_steps_burnin <= self.learning_steps_total <= self.train_iterations:
            raise ValueError("need 0 <= learning_steps_burnin <= learning_steps_total <= train_iterations")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("epsilon_min", "epsilon_test_time", "momentum"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.batch_size < 1 or self.experience_size < 1:
            raise ValueError("batch_size and experience_size must be >= 1")
        if self.target_update_period < 0:
            raise ValueError("target_update_period must be >= 0")


# --------------------------------------------------------------------------
# states and networks


def build_state(history: Sequence[tuple[np.ndarray, int]], current_x: np.ndarray, w: int) -> np.ndarray:
    """Concatenate the ``w`` most recent (observation, one-hot action) pairs with ``current_x``.

    Missing history (early in an episode) is zero-padded at the front.
    """
    current_x = np.asarray(current_x, dtype=np.float64)
    if w == 0:
        return current_x
    d = current_x.shape[0]
    seg = d + N_ACTIONS
    out = np.zeros(w * seg + d)
    recent = list(history)[-w:]
    offset = (w - len(recent)) * seg
    for x, a in recent:
        out[offset : offset + d] = x
        out[offset + d + int(a)] = 1.0
        offset += seg
    out[w * seg :] = current_x
    return out


def state_dim(n_cells: int, w: int) -> int:
    return w * (n_cells + N_ACTIONS) + n_cells


def _activations(net: QNetwork, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        h = z if k == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward(net: QNetwork, state: np.ndarray) -> np.ndarray:
    """Q-values for one state (shape ``(5,)``) or a batch (shape ``(n, 5)``)."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape[-1] != net.spec.input_dim:
        raise ValueError(f"state has {state.shape[-1]} entries, network expects {net.spec.input_dim}")
    return _activations(net, state)[-1]


def act(net: QNetwork, state: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(N_ACTIONS))
    return int(np.argmax(forward(net, state)))  # argmax picks the lowest index on ties


def act_many(net: QNetwork, states: np.ndarray, epsilon: float, rng: np.random.Generator) -> list[int]:
    """Per-row ``act`` with one batched forward pass; consumes the RNG exactly like ``act``."""
    greedy = np.argmax(forward(net, states), axis=1)
    out = []
    for g in greedy:
        if rng.random() < epsilon:
            out.append(int(rng.integers(N_ACTIONS)))
        else:
            out.append(int(g))
    return out


def epsilon_at(step_idx: int, sched: TrainSchedule, mode: str = "train") -> float:
    if mode == "eval":
        return sched.epsilon_test_time
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    burnin, total = sched.learning_steps_burnin, sched.learning_steps_total
    if step_idx < burnin:
        return 1.0
    if step_idx >= total:
        return sched.epsilon_min
    frac = (step_idx - burnin) / (total - burnin)
    return 1.0 - frac * (1.0 - sched.epsilon_min)


# --------------------------------------------------------------------------
# replay memory


@dataclass
class Transition:
    s: np.ndarray
    a: int
    r: float
    s2: np.ndarray
    terminal: bool = False


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    terminal: np.ndarray

    def __len__(self):
        return len(self.a)


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is overwritten first."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, dim))
        self.s2 = np.zeros((capacity, dim))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition) -> None:
        if not 0 <= t.a < N_ACTIONS:
            raise ValueError(f"action index {t.a} out of range")
        i = self._next
        self.s[i] = t.s
        self.a[i] = t.a
        self.r[i] = t.r
        self.s2[i] = t.s2
        self.terminal[i] = t.terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def contents(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        start = self._next if self.size == self.capacity else 0
        idx = [(start + k) % self.capacity for k in range(self.size)]
        return [Transition(self.s[i].copy(), int(self.a[i]), float(self.r[i]), self.s2[i].copy(), bool(self.terminal[i])) for i in idx]

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = rng.integers(self.size, size=batch_size)
        return self.take(idx)

    def take(self, idx) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.terminal[idx])


def sample_minibatch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> Batch:
    return buffer.sample(batch_size, rng)


# --------------------------------------------------------------------------
# learning


def td_targets(net: QNetwork, target_net: QNetwork | None, batch: Batch, gamma: float) -> np.ndarray:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    evaluator = target_net if target_net is not None else net
    best_next = forward(evaluator, batch.s2).max(axis=1)
    return np.where(batch.terminal, batch.r, batch.r + gamma * best_next)


def loss_and_grads(net: QNetwork, states: np.ndarray, actions: np.ndarray, targets: np.ndarray):
    """Mean squared TD error on the taken actions and its parameter gradients."""
    acts = _activations(net, states)
    q = acts[-1]
    n = len(actions)
    rows = np.arange(n)
    err = q[rows, actions] - targets
    loss = float(np.mean(err**2))
    delta = np.zeros_like(q)
    delta[rows, actions] = 2.0 * err / n
    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    for k in range(len(net.weights) - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ net.weights[k].T) * (acts[k] > 0)
    return loss, gw, gb


def objective(net: QNetwork, states, actions, targets, l2_decay: float) -> float:
    """Loss plus the L2 penalty on weights; the quantity ``train_step`` descends."""
    q = forward(net, states)
    err = q[np.arange(len(actions)), actions] - targets
    penalty = 0.5 * l2_decay * sum(float(np.sum(w * w)) for w in net.weights)
    return float(np.mean(err**2)) + penalty


def train_step(net: QNetwork, batch: Batch, sched: TrainSchedule, target_net: QNetwork | None = None) -> float:
    """One SGD-with-momentum update; returns the loss measured before the update."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    with np.errstate(over="ignore", invalid="ignore"):
        y = td_targets(net, target_net, batch, sched.gamma)
        loss, gw, gb = loss_and_grads(net, batch.s, batch.a, y)
    if not np.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss {loss}")
    lr, mu, l2 = sched.learning_rate, sched.momentum, sched.l2_decay
    for k in range(len(net.weights)):
        net.vel_w[k] = mu * net.vel_w[k] - lr * (gw[k] + l2 * net.weights[k])
        net.vel_b[k] = mu * net.vel_b[k] - lr * gb[k]
        net.weights[k] += net.vel_w[k]
        net.biases[k] += net.vel_b[k]
    return loss


# --------------------------------------------------------------------------
# training loop

RewardFn = Callable[[World, Sequence[int]], np.ndarray]


def individual_reward(world: World, agent_ids: Sequence[int]) -> np.ndarray:
    return world.speed[list(agent_ids)] / world.cfg.max_speed


def joint_reward(world: World, agent_ids: Sequence[int]) -> np.ndarray:
    mean = float(np.mean(world.speed[list(agent_ids)]))
    return np.full(len(agent_ids), mean / world.cfg.max_speed)


@dataclass
class TrainResult:
    net: QNetwork
    curve: list[float]  # mean reward per 1000 ticks
    updates: int
    transitions: int


def _seeds(seed: int) -> tuple[int, int, int]:
    world_ss, net_ss, agent_ss = np.random.SeedSequence(seed).spawn(3)
    return (
        int(world_ss.generate_state(1, np.uint64)[0]),
        int(net_ss.generate_state(1, np.uint64)[0]),
        int(agent_ss.generate_state(1, np.uint64)[0]),
    )


def train_dqn(
    make_world: Callable[[int], World],
    obs_spec: ObservationSpec,
    net_spec: NetSpec,
    sched: TrainSchedule,
    reward_fn: RewardFn,
    seed: int,
    curve_every: int = 1000,
    on_update: Callable[[int], None] | None = None,
) -> TrainResult:
    """Deep Q-learning with experience replay over ``train_iterations`` ticks.

    ``make_world(world_seed)`` builds the environment; every policy vehicle in
    it is an agent sharing the one network and the one replay buffer. Each tick
    stores one transition per agent and, once the buffer holds
    ``start_learn_threshold`` transitions, performs one minibatch update.
    """
    world_seed, net_seed, agent_seed = _seeds(seed)
    world = make_world(world_seed)
    agents = world.policy_ids
    if not agents:
        raise ValueError("the training world has no policy-controlled vehicles")
    w = obs_spec.temporal_window
    if net_spec.input_dim != state_dim(obs_spec.n_cells, w):
        raise ValueError("network input_dim does not match the observation spec")

    net = init_network(net_spec, net_seed)
    target = net.copy() if sched.target_update_period > 0 else None
    rng = np.random.default_rng(agent_seed)
    buffer = ReplayBuffer(sched.experience_size, net_spec.input_dim)
    histories: list[list[tuple[np.ndarray, int]]] = [[] for _ in agents]

    x = observe_many(world, agents, obs_spec)
    curve: list[float] = []
    window_sum, window_n = 0.0, 0
    updates = 0
    pushed = 0
    for t in range(sched.train_iterations):
        states = np.stack([build_state(h, xi, w) for h, xi in zip(histories, x)])
        eps = epsilon_at(t, sched, "train")
        actions = act_many(net, states, eps, rng)
        step(world, dict(zip(agents, actions)))
        rewards = reward_fn(world, agents)
        x_next = observe_many(world, agents, obs_spec)
        for k in range(len(agents)):
            if w:
                histories[k].append((x[k], actions[k]))
                del histories[k][:-w]
            s2 = build_state(histories[k], x_next[k], w)
            buffer.push(Transition(states[k], actions[k], float(rewards[k]), s2, False))
            pushed += 1
        x = x_next
        window_sum += float(np.mean(rewards))
        window_n += 1
        if window_n == curve_every:
            curve.append(window_sum / window_n)
            window_sum, window_n = 0.0, 0

        if buffer.size >= sched.start_learn_threshold:
            batch = buffer.sample(sched.batch_size, rng)
            try:
                train_step(net, batch, sched, target)
            except TrainingDivergence as exc:
                raise TrainingDivergence(f"diverged at tick {t}: {exc}", curve) from None
            updates += 1
            if on_update is not None:
                on_update(t)
        if target is not None and (t + 1) % sched.target_update_period == 0:
            target = net.copy()
    if window_n:
        curve.append(window_sum / window_n)
    log.debug("trained %d ticks, %d updates, %d transitions", sched.train_iterations, updates, pushed)
    return TrainResult(net, curve, updates, pushed)
