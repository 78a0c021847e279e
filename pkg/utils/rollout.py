"""
Episode rollouts and asynchronous collection.

run_episode drives one episode through the env and the state encoder. The Orchestrator hands
EpisodeTickets to idle workers of a WorkerPool until `target` tickets are dispatched, re-dispatching
a failed ticket once with the same seed, and returns the trajectories in ticket order.
"""
import logging
import math
import threading
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
from tqdm import tqdm

from envs.encoding import HistoryCache, encode_observation, prune_tokens, summarize, update_state
from envs.gridnav import N_ACTIONS, EpisodeResult, NavAction
from envs.layouts import Heading, layout_hash
from loss.advantage import RolloutBuffer, Trajectory, Transition
from policy.categorical import PolicyParams, action_distribution, sample_action
from .errors import CollectionError, DataError, UsageError
from .records import read_records, write_records


class PolicyAgent:
    """Samples from (or, greedy, takes the argmax of) a parameter snapshot"""

    def __init__(self, params, greedy=False):
        self.params = params
        self.greedy = greedy

    def act(self, features, env, rng):
        dist = action_distribution(features, self.params)
        if self.greedy:
            action = dist.greedy()
            return action, dist.log_prob(action)
        return sample_action(dist, rng)


def oracle_action(env):
    """Shortest-path action: STOP within the success radius, else move or turn toward a closer cell"""
    d = env.geodesic()
    if d <= env.success_radius:
        return NavAction.STOP
    cell, heading = env.pose.cell, env.pose.heading
    fr, fc = heading.forward
    ahead = (cell[0] + fr, cell[1] + fc)
    if not env.layout.blocked(ahead) and env.geodesic(ahead) == d - 1:
        return NavAction.MOVE_FORWARD
    for target in Heading:
        tr, tc = target.forward
        nxt = (cell[0] + tr, cell[1] + tc)
        if not env.layout.blocked(nxt) and env.geodesic(nxt) == d - 1:
            return NavAction.TURN_LEFT if (target - heading) % 4 == 3 else NavAction.TURN_RIGHT
    raise UsageError(f'no descending neighbour at {cell} with geodesic {d}')


class OracleAgent:
    def act(self, features, env, rng):
        return oracle_action(env), 0.0


class ConstantAgent:
    def __init__(self, action=NavAction.STOP):
        self.action = NavAction(action)

    def act(self, features, env, rng):
        return self.action, 0.0


class RandomAgent:
    def act(self, features, env, rng):
        action = NavAction(int(rng.integers(N_ACTIONS)))
        return action, -math.log(N_ACTIONS)


class ScriptedAgent:
    """Replays a fixed action sequence regardless of the features it is shown"""

    def __init__(self, actions):
        self.actions = list(actions)
        self.cursor = 0

    def act(self, features, env, rng):
        if self.cursor >= len(self.actions):
            raise DataError(f'action sequence exhausted after {self.cursor} steps without ending the episode')
        raw = self.actions[self.cursor]
        self.cursor += 1
        try:
            return NavAction(raw), 0.0
        except ValueError as e:
            raise DataError(f'invalid action {raw!r} at step {self.cursor}') from e


def run_episode(env, layout, agent, spec, delta, seed=0, trajectory_id=0, policy_version=0):
    rng = np.random.default_rng(seed)
    _, obs = env.reset(layout, seed)
    cache = HistoryCache.empty(spec.token_dim)
    transitions = []
    total_tokens = 0
    while not env.done:
        tokens = encode_observation(obs, spec)
        pruned = prune_tokens(tokens, cache, delta)
        features = summarize(cache, pruned, layout.goal_class, spec)
        action, log_prob = agent.act(features, env, rng)
        pose, geodesic = env.pose, env.geodesic()
        outcome = env.step(action)
        cache = update_state(cache, pruned, action)
        transitions.append(Transition(features, int(action), float(log_prob), outcome.reward,
                                      len(transitions) + 1, pruned.kept_count, pose.cell,
                                      int(pose.heading), geodesic))
        total_tokens += len(tokens)
        obs = outcome.observation
    return Trajectory(tuple(transitions), env.result, trajectory_id, policy_version,
                      layout_hash(layout), layout.goal_class, seed, total_tokens)


def trace_records(traj):
    return [{'t': tr.timestep, 'row': tr.cell[0], 'col': tr.cell[1], 'heading': Heading(tr.heading).name,
             'action': NavAction(tr.action).name, 'reward': tr.reward, 'geodesic': tr.geodesic}
            for tr in traj.transitions]


class TicketState(IntEnum):
    DISPATCHED = 0
    RUNNING = 1
    COMPLETE = 2


@dataclass
class EpisodeTicket:
    ticket_id: int
    layout_seed: int
    policy_version: int
    index: int = 0
    attempt: int = 0
    state: TicketState = TicketState.DISPATCHED

    def advance(self, state):
        if state != self.state + 1:
            raise UsageError(f'ticket {self.ticket_id} cannot move from {self.state.name} to {TicketState(state).name}')
        self.state = TicketState(state)


def ticket_seed(base_seed, ticket_id):
    """Episode seed indexed by ticket, so any worker count yields the same set of episodes"""
    return int(np.random.SeedSequence([base_seed, ticket_id]).generate_state(1)[0])


class WorkerPool:
    """worker_count threads, each running at most one episode at a time"""

    def __init__(self, worker_count=1):
        if worker_count < 1:
            raise UsageError(f'worker_count must be >= 1, got {worker_count}')
        self.worker_count = worker_count
        self.peak_busy = 0
        self._busy = set()
        self._lock = threading.Lock()

    def _enter(self, worker_id):
        with self._lock:
            if worker_id in self._busy:
                raise UsageError(f'worker {worker_id} is already running an episode')
            self._busy.add(worker_id)
            self.peak_busy = max(self.peak_busy, len(self._busy))

    def _leave(self, worker_id):
        with self._lock:
            self._busy.discard(worker_id)

    def run(self, jobs, handle, on_failure, progress=False):
        """
        Runs jobs (a list consumed from the front) on idle workers. handle(job, result) receives
        finished jobs; on_failure(job, error) may return a replacement job that is queued next.
        """
        pending = list(jobs)
        idle = list(range(self.worker_count))
        running = {}
        with ThreadPoolExecutor(max_workers=self.worker_count) as ex, \
                tqdm(total=len(pending), desc='Collecting', unit='ep', disable=not progress, leave=False) as pbar:
            while pending or running:
                while pending and idle:
                    job, worker_id = pending.pop(0), idle.pop(0)
                    running[ex.submit(self._work, worker_id, job)] = (job, worker_id)
                done, _ = wait(running, return_when=FIRST_COMPLETED)
                for future in sorted(done, key=lambda f: running[f][1]):
                    job, worker_id = running.pop(future)
                    idle.append(worker_id)
                    error = future.exception()
                    if error is None:
                        handle(job, future.result())
                        pbar.update(1)
                        continue
                    replacement = on_failure(job, error)
                    if replacement is not None:
                        pending.insert(0, replacement)
                idle.sort()

    def _work(self, worker_id, job):
        self._enter(worker_id)
        try:
            return job()
        finally:
            self._leave(worker_id)


class _TicketJob:
    def __init__(self, orchestrator, ticket, run):
        self.orchestrator = orchestrator
        self.ticket = ticket
        self._run = run

    def __call__(self):
        self.ticket.advance(TicketState.RUNNING)
        if self.orchestrator.fault_injector is not None:
            self.orchestrator.fault_injector(self.ticket)
        return self._run(self.ticket)


class Orchestrator:
    """Sole owner of the ticket table; workers only see one ticket and return one trajectory"""

    def __init__(self, env_factory, spec, delta, pool=None, base_seed=0, fault_injector=None,
                 spill_dir=None, progress=False):
        self.env_factory = env_factory
        self.spec = spec
        self.delta = delta
        self.pool = pool or WorkerPool(1)
        self.base_seed = base_seed
        self.fault_injector = fault_injector
        self.spill_dir = spill_dir
        self.progress = progress
        self.next_ticket_id = 0
        self.tickets = {}
        self.completed = 0
        self.redispatches = []
        self._spilled = set()

    def dispatch(self, policy_version, index):
        ticket_id = self.next_ticket_id
        self.next_ticket_id += 1
        ticket = EpisodeTicket(ticket_id, ticket_seed(self.base_seed, ticket_id), policy_version, index)
        self.tickets[ticket_id] = ticket
        return ticket

    def collect(self, target, snapshot, layout_sampler, policy_version=0, greedy=False):
        """
        Exactly `target` episodes; layout_sampler(index, layout_seed) picks each episode's layout.
        snapshot is PolicyParams (copied here) or any agent exposing act(features, env, rng).
        """
        if target < 1:
            raise UsageError(f'collect target must be >= 1, got {target}')
        if isinstance(snapshot, PolicyParams):
            agent = PolicyAgent(snapshot.clone(), greedy)
        else:
            agent = snapshot

        def run(ticket):
            layout = layout_sampler(ticket.index, ticket.layout_seed)
            return run_episode(self.env_factory(), layout, agent, self.spec, self.delta, seed=ticket.layout_seed,
                               trajectory_id=ticket.ticket_id, policy_version=ticket.policy_version)

        results = {}

        def handle(job, traj):
            job.ticket.advance(TicketState.COMPLETE)
            results[job.ticket.ticket_id] = traj

        def on_failure(job, error):
            ticket = job.ticket
            if ticket.attempt >= 1:
                raise CollectionError(f'ticket {ticket.ticket_id} failed twice: {error}', ticket.ticket_id) from error
            logging.warning(f'Ticket {ticket.ticket_id} failed ({error!r}), re-dispatching')
            retry = EpisodeTicket(ticket.ticket_id, ticket.layout_seed, ticket.policy_version, ticket.index,
                                  attempt=ticket.attempt + 1)
            self.tickets[ticket.ticket_id] = retry
            self.redispatches.append(ticket.ticket_id)
            return _TicketJob(self, retry, run)

        tickets = [self.dispatch(policy_version, index) for index in range(target)]
        self.pool.run([_TicketJob(self, t, run) for t in tickets], handle, on_failure, self.progress)
        trajectories = [results[t.ticket_id] for t in tickets]
        for t in tickets:
            del self.tickets[t.ticket_id]
        self.completed += len(tickets)
        if self.spill_dir is not None:
            Path(self.spill_dir).mkdir(parents=True, exist_ok=True)
            path = Path(self.spill_dir) / f'trajectories_v{policy_version}.jsonl'
            # a version file left by an earlier run is truncated on first write
            spill_trajectories(trajectories, path, 'a' if path in self._spilled else 'w')
            self._spilled.add(path)
        return trajectories


def retain(buffer, fresh):
    """Append fresh trajectories, evicting the oldest beyond retention_capacity"""
    kept = (tuple(buffer.trajectories) + tuple(fresh))[-buffer.retention_capacity:]
    return RolloutBuffer(kept, buffer.retention_capacity, buffer.group_size)


def spill_records(traj):
    r = traj.episode_result
    return [{'trajectory_id': traj.trajectory_id, 'policy_version': traj.policy_version, 't': tr.timestep,
             'action': tr.action, 'reward': tr.reward, 'behavior_log_prob': tr.behavior_log_prob,
             'success': r.success, 'spl': r.spl, 'path_length': r.path_length,
             'optimal_length': r.optimal_length, 'goal_class': traj.goal_class, 'layout_hash': traj.layout_hash,
             'kept_count': tr.kept_count, 'total_tokens': traj.total_tokens}
            for tr in traj.transitions]


def spill_trajectories(trajectories, path, mode='a'):
    write_records([rec for traj in trajectories for rec in spill_records(traj)], path, mode)


def load_trajectories(path):
    """Rebuild spilled trajectories (without features), in file order"""
    grouped = {}
    previous = None
    for n, rec in enumerate(read_records(path), 1):
        trajectory_id = rec['trajectory_id']
        recs = grouped.setdefault(trajectory_id, [])
        if recs and (trajectory_id != previous or rec['t'] != recs[-1]['t'] + 1):
            raise DataError(f'{path} record {n}: trajectory {trajectory_id} appears twice '
                            f'(records from more than one run in one spill file?)')
        recs.append(rec)
        previous = trajectory_id
    trajectories = []
    for trajectory_id, recs in grouped.items():
        last = recs[-1]
        transitions = tuple(Transition(None, rec['action'], rec['behavior_log_prob'], rec['reward'], rec['t'],
                                       rec.get('kept_count', 0)) for rec in recs)
        result = EpisodeResult(last['success'], last.get('path_length', 0), last.get('optimal_length', 0),
                               last['spl'], len(recs))
        trajectories.append(Trajectory(transitions, result, trajectory_id, last['policy_version'],
                                       last.get('layout_hash', ''), last.get('goal_class', 0),
                                       total_tokens=last.get('total_tokens', 0)))
    return trajectories
