"""Deterministic discrete-event execution core.

One Engine owns a simulated device: contexts with their page tables, channels
grouped into timeslice groups, a round-robin runlist, and a small physical
memory for semaphore values. Exactly one timeslice group is active at a time.
While a group is active, the head commands of all its pending channels run
concurrently under a two-resource model (compute and graphics): if the
combined demand of the running commands exceeds a resource's capacity, every
running command stretches by the same factor, recomputed at each event
boundary. Commands are never preempted mid-flight; when a group's quantum
expires, in-flight commands finish, trailing zero-duration commands of the
same buffer (semaphore writes) flush with them, and only then does the next
group take over. Suspended buffers resume in the group's next slice.

Workload drivers are generator processes. They submit work, then yield wait
conditions (a stream semaphore threshold, or an absolute deadline) and are
resumed when the condition holds. Resumption order, completion ties, and
channel launch order are all broken on ids, so identical inputs produce
byte-identical traces.
"""

from __future__ import annotations

import dataclasses
import json
from bisect import insort
from dataclasses import dataclass

from .channels import (AlreadyBound, Channel, ChannelError, ComputeConfig, Context,
                       ContextKind, GpFifoEntry, NotBound, PoolExhausted, Ring,
                       RingFull, Snapshot, StreamHandle, restore_snapshot,
                       swap_submission_state, take_snapshot)
from .commands import CommandKind, GpuCommand, init_compute, semaphore_write
from .config import DeviceConfig
from .vm import AllocPolicy, MemorySystem, PageFault, SizeClass

_EPS = 1e-9


class EngineError(Exception):
    pass


@dataclass(frozen=True)
class FaultRecord:
    kind: str                 # "page_fault" | "execution_fault"
    channel: int
    time: float
    vaddr: int | None = None
    detail: str = ""


class Condition:
    def satisfied(self, engine: "Engine") -> bool:
        raise NotImplementedError


@dataclass(frozen=True)
class SemaphoreAtLeast(Condition):
    space_id: int
    vaddr: int
    value: int

    def satisfied(self, engine):
        return engine._read_semaphore(self.space_id, self.vaddr) >= self.value


@dataclass(frozen=True)
class TimeReached(Condition):
    time: float

    def satisfied(self, engine):
        return engine.clock >= self.time - _EPS


class _Process:
    __slots__ = ("pid", "gen", "condition", "done")

    def __init__(self, pid, gen):
        self.pid = pid
        self.gen = gen
        self.condition: Condition | None = None
        self.done = False


@dataclass
class TimesliceGroup:
    id: int
    quantum: float
    channel_ids: list[int] = dataclasses.field(default_factory=list)


class MetricsTrace:
    """Everything one run produced: events, utilization, windows, faults."""

    def __init__(self):
        self.events: list[dict] = []
        self.segments: list[tuple] = []   # (t0, t1, compute_util, graphics_util, tsg)
        self.windows: list[tuple] = []    # (tsg, t0, t1)
        self.faults: list[FaultRecord] = []
        self.makespan = 0.0
        self.stalled: list[int] = []

    def compute_busy(self) -> float:
        return sum((t1 - t0) * cu for t0, t1, cu, _, _ in self.segments)

    def graphics_busy(self) -> float:
        return sum((t1 - t0) * gu for t0, t1, _, gu, _ in self.segments)

    def mean_compute_util(self) -> float:
        return self.compute_busy() / self.makespan if self.makespan > 0 else 0.0

    def mean_graphics_util(self) -> float:
        return self.graphics_busy() / self.makespan if self.makespan > 0 else 0.0

    def utilization_samples(self, sample_dt: float) -> list[dict]:
        """Fixed-interval averages of the exact utilization segments."""
        if self.makespan <= 0:
            return []
        n_bins = int(self.makespan / sample_dt - _EPS) + 1
        acc_c = [0.0] * n_bins
        acc_g = [0.0] * n_bins
        tsg_of = [None] * n_bins
        for t0, t1, cu, gu, tsg in self.segments:
            i = int(t0 / sample_dt + _EPS)
            while i < n_bins and t0 < t1 - _EPS:
                hi = min(t1, (i + 1) * sample_dt)
                frac = (hi - t0) / sample_dt
                acc_c[i] += cu * frac
                acc_g[i] += gu * frac
                if tsg is not None and tsg_of[i] is None:
                    tsg_of[i] = tsg
                t0 = hi
                i += 1
        return [{"time": i * sample_dt, "compute_util": acc_c[i],
                 "graphics_util": acc_g[i], "tsg": tsg_of[i]}
                for i in range(n_bins)]

    def summary(self) -> dict:
        return {"makespan": self.makespan, "compute_busy": self.compute_busy(),
                "graphics_busy": self.graphics_busy(), "faults": len(self.faults)}

    def event_lines(self) -> list[str]:
        return [json.dumps(e, separators=(",", ":")) for e in self.events]

    def exec_intervals(self, stream_id: int | None = None,
                       kind: str | None = None) -> list[tuple]:
        """(start, end, tsg, channel) per executed timed command, paired from events."""
        open_by_channel: dict[int, dict] = {}
        out = []
        for ev in self.events:
            if ev["event"] == "exec_start":
                open_by_channel[ev["channel"]] = ev
            elif ev["event"] == "exec_end":
                start = open_by_channel.pop(ev["channel"])
                if stream_id is not None and start.get("stream") != stream_id:
                    continue
                if kind is not None and start.get("kind") != kind:
                    continue
                out.append((start["time"], ev["time"], ev["tsg"], ev["channel"]))
        return out


class _Inflight:
    __slots__ = ("remaining", "cmd")

    def __init__(self, remaining, cmd):
        self.remaining = remaining
        self.cmd = cmd


class Engine:
    """A whole simulated device plus its deterministic event loop."""

    def __init__(self, config: DeviceConfig | None = None):
        self.config = config or DeviceConfig()
        self.memory = MemorySystem(self.config.geometry,
                                   propagate_tlb=not self.config.disable_tlb_propagation)
        self.clock = 0.0
        self.contexts: dict[int, Context] = {}
        self.channels: dict[int, Channel] = {}
        self.streams: dict[int, StreamHandle] = {}
        self.tsgs: dict[int, TimesliceGroup] = {}
        self.trace = MetricsTrace()
        self.phys_mem: dict[tuple[int, int], int] = {}
        self.processes: list[_Process] = []
        self.grafted_pairs: dict[tuple[int, int], object] = {}
        self._token_owner: dict[int, int] = {}
        self._tsg_order: list[int] = []
        self._rr_index = -1
        self._last_tsg: int | None = None
        self._infer_busy_until = 0.0
        self._running = False
        self._seq = 0
        self._next_id = {"context": 0, "channel": 0, "stream": 0, "tsg": 0}

    # ------------------------------------------------------------------
    # identity helpers

    def _take_id(self, kind: str) -> int:
        n = self._next_id[kind]
        self._next_id[kind] = n + 1
        return n

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _log(self, event: str, channel: int | None, tsg: int | None,
             stream: int | None, **extra):
        row = {"time": self.clock, "event": event, "channel": channel,
               "tsg": tsg, "stream": stream}
        row.update(extra)
        self.trace.events.append(row)

    # ------------------------------------------------------------------
    # construction

    def create_context(self, kind: ContextKind) -> Context:
        """New context with a fresh timeslice group, table, and default channel."""
        mem = self.memory
        if kind is ContextKind.COMPUTE:
            space = mem.create_space(AllocPolicy.HIGH_RANGE, base=self.config.high_base)
        else:
            space = mem.create_space(AllocPolicy.LOW_RANGE, base=self.config.low_base,
                                     limit=self.config.high_base)
        tsg = TimesliceGroup(self._take_id("tsg"), self.config.quantum)
        self.tsgs[tsg.id] = tsg
        self._tsg_order.append(tsg.id)
        ctx = Context(self._take_id("context"), kind, space.id, tsg.id)
        self.contexts[ctx.id] = ctx
        # small always-present footprint standing in for runtime-internal state
        va = mem.allocate(space, 1, SizeClass.SMALL)
        mem.map_range(space, va, mem.alloc_phys(SizeClass.SMALL))
        channel = self._create_channel(ctx, visible_to_app=True)
        if kind is ContextKind.COMPUTE:
            # natively provisioned compute channels come pre-configured
            channel.compute_config = ctx.compute_state
        return ctx

    def _create_channel(self, ctx: Context, visible_to_app: bool) -> Channel:
        mem = self.memory
        space = mem.spaces[ctx.space_id]
        cap = self.config.ring_capacity
        cmdbuf_base = mem.allocate(space, cap, SizeClass.SMALL)
        mem.map_range(space, cmdbuf_base, mem.alloc_phys(SizeClass.SMALL, cap))
        channel_id = self._take_id("channel")
        token = 0x1000 + channel_id
        channel = Channel(channel_id, ctx.id, ctx.tsg_id, Ring(cap), token,
                          cmdbuf_base, visible_to_app)
        self.channels[channel_id] = channel
        self.contexts[ctx.id].channels.append(channel_id)
        self.tsgs[ctx.tsg_id].channel_ids.append(channel_id)
        self._token_owner[token] = channel_id
        return channel

    def create_stream(self, ctx: Context) -> StreamHandle:
        """Client work queue. Compute streams get their own channel; graphics
        streams share the context's single app-visible channel."""
        mem = self.memory
        space = mem.spaces[ctx.space_id]
        if ctx.kind is ContextKind.COMPUTE:
            channel = self._create_channel(ctx, visible_to_app=True)
        else:
            channel = self.channels[ctx.channels[0]]
        sync_vaddr = mem.allocate(space, 1, SizeClass.SMALL)
        mem.map_range(space, sync_vaddr, mem.alloc_phys(SizeClass.SMALL))
        cap = self.config.ring_capacity
        cmdbuf_base = mem.allocate(space, cap, SizeClass.SMALL)
        mem.map_range(space, cmdbuf_base, mem.alloc_phys(SizeClass.SMALL, cap))
        stream = StreamHandle(self._take_id("stream"), ctx.id, channel.id,
                              sync_vaddr, cmdbuf_base)
        self.streams[stream.id] = stream
        return stream

    def provision_forwarding_pool(self, graphics_ctx: Context, requested: int) -> list[int]:
        """Create up to hw_max_queues-1 app-invisible channels in the graphics group."""
        if graphics_ctx.kind is not ContextKind.GRAPHICS:
            raise ValueError("forwarding channels live in a graphics context")
        room = max(0, self.config.hw_max_queues - len(graphics_ctx.channels))
        ids = []
        for _ in range(min(requested, room)):
            ch = self._create_channel(graphics_ctx, visible_to_app=False)
            ids.append(ch.id)
        graphics_ctx.forward_pool.extend(ids)
        return ids

    # ------------------------------------------------------------------
    # submission path

    def submit(self, stream: StreamHandle, commands: list[GpuCommand]):
        """Four micro-ops, identical whether or not the stream is redirected:
        write the command buffer, append a ring entry, advance PUT, ring the
        doorbell. A trailing semaphore write is appended to every buffer."""
        ch = self.channels[stream.channel_id]
        if ch.userd.put - ch.userd.get >= ch.ring.capacity:
            raise RingFull(f"channel {ch.id} ring is full")
        ctx = self.contexts[stream.context_id]
        space = self.memory.spaces[ctx.space_id]
        stream.next_semaphore_value += 1
        buf = tuple(commands) + (semaphore_write(stream.sync_vaddr,
                                                 stream.next_semaphore_value),)
        seq = self._next_seq()
        micro_ops = 0
        # 1: command buffer written into the stream's context memory
        slot_vaddr = stream.cmdbuf_base + (ch.userd.put % ch.ring.capacity) * SizeClass.SMALL.nbytes
        self.memory.translate(space, slot_vaddr)
        micro_ops += 1
        # 2: ring entry appended
        entry = GpFifoEntry(slot_vaddr, len(buf), buf, seq, stream.id)
        ch.ring.slots[ch.userd.put % ch.ring.capacity] = entry
        micro_ops += 1
        # 3: PUT advanced
        ch.userd.put += 1
        micro_ops += 1
        # 4: doorbell rung with the channel's current token
        owner = self._ring_doorbell(ch.token, stream.id)
        micro_ops += 1
        self._log("submit", owner.id, owner.tsg_id, stream.id, seq=seq,
                  micro_ops=micro_ops)
        return seq

    def _ring_doorbell(self, token: int, stream_id: int | None) -> Channel:
        owner = self.channels[self._token_owner[token]]
        owner.pending = True
        self._log("doorbell", owner.id, owner.tsg_id, stream_id, token=token)
        return owner

    def bootstrap(self, channel: Channel, config: ComputeConfig):
        """Queue compute-state initialization through the channel's own ring."""
        ctx = self.contexts[channel.context_id]
        if ctx.kind is not ContextKind.GRAPHICS:
            raise ValueError("bootstrap targets channels in the graphics group")
        if channel.userd.put - channel.userd.get >= channel.ring.capacity:
            raise RingFull(f"channel {channel.id} ring is full")
        slot_vaddr = channel.cmdbuf_base + (channel.userd.put % channel.ring.capacity) \
            * SizeClass.SMALL.nbytes
        entry = GpFifoEntry(slot_vaddr, 1, (init_compute(config),), self._next_seq(), None)
        channel.ring.slots[channel.userd.put % channel.ring.capacity] = entry
        channel.userd.put += 1
        self._ring_doorbell(channel.token, None)
        self._log("bootstrap", channel.id, channel.tsg_id, None,
                  local_memory_bytes=config.local_memory_bytes)

    def set_local_memory(self, ctx: Context, nbytes: int):
        """Grow the context's scratch size; growth is re-pushed to every
        forwarding channel currently serving one of the context's streams."""
        if ctx.kind is not ContextKind.COMPUTE:
            raise ValueError("only compute contexts carry a scratch pool")
        grew = nbytes > ctx.compute_state.local_memory_bytes
        ctx.compute_state = dataclasses.replace(ctx.compute_state,
                                                local_memory_bytes=nbytes)
        if not grew:
            return
        for sid in sorted(ctx.bound_stream_ids):
            fwd = self.channels[self.streams[sid].bound_channel_id]
            self.bootstrap(fwd, ctx.compute_state)

    # ------------------------------------------------------------------
    # stream redirection

    def bind(self, stream: StreamHandle, graphics_ctx: Context):
        """Snapshot-and-swap the stream onto a forwarding channel.

        Drains the stream, makes sure the context pair's tables are grafted,
        bootstraps the forwarding channel if it has never run compute, then
        swaps ring/cursors/token. Control-plane call: not valid from inside a
        running driver process.
        """
        if self._running:
            raise EngineError("bind is a control-plane call, not valid mid-run")
        if stream.bound:
            raise AlreadyBound(f"stream {stream.id} is already bound")
        if graphics_ctx.kind is not ContextKind.GRAPHICS:
            raise ValueError("streams bind to graphics contexts")
        if not graphics_ctx.forward_pool:
            raise PoolExhausted("no forwarding channels available")
        ctx = self.contexts[stream.context_id]
        self._drain_stream(stream)
        pair = (ctx.space_id, graphics_ctx.space_id)
        if pair not in self.grafted_pairs and not self.config.disable_graft:
            src = self.memory.spaces[ctx.space_id]
            dst = self.memory.spaces[graphics_ctx.space_id]
            self.grafted_pairs[pair] = self.memory.graft(src, dst)
        fwd = self.channels[graphics_ctx.forward_pool.pop(0)]
        if fwd.compute_config is None and not self.config.skip_bootstrap:
            self.bootstrap(fwd, ctx.compute_state)
        ch = self.channels[stream.channel_id]
        stream.saved_snapshot = take_snapshot(ch)
        swap_submission_state(ch, fwd)
        stream.bound_channel_id = fwd.id
        ctx.bound_stream_ids.add(stream.id)
        self._log("bind", ch.id, graphics_ctx.tsg_id, stream.id, forwarding=fwd.id)

    def unbind(self, stream: StreamHandle):
        """Drain, restore the saved snapshot, and return the forwarding channel."""
        if self._running:
            raise EngineError("unbind is a control-plane call, not valid mid-run")
        if not stream.bound:
            raise NotBound(f"stream {stream.id} is not bound")
        self._drain_stream(stream)
        ch = self.channels[stream.channel_id]
        fwd_id = stream.bound_channel_id
        restore_snapshot(ch, stream.saved_snapshot)
        ctx = self.contexts[stream.context_id]
        gctx = self.contexts[self.channels[fwd_id].context_id]
        insort(gctx.forward_pool, fwd_id)
        stream.saved_snapshot = None
        stream.bound_channel_id = None
        ctx.bound_stream_ids.discard(stream.id)
        self._log("unbind", ch.id, ctx.tsg_id, stream.id, forwarding=fwd_id)

    def _drain_stream(self, stream: StreamHandle):
        target = stream.next_semaphore_value
        if target and self.stream_semaphore(stream) < target:
            self.run(until=lambda e: e.stream_semaphore(stream) >= target)

    # ------------------------------------------------------------------
    # semaphores and processes

    def _read_semaphore(self, space_id: int, vaddr: int) -> int:
        page, off = self.memory.translate(self.memory.spaces[space_id], vaddr)
        return self.phys_mem.get((page.id, off), 0)

    def stream_semaphore(self, stream: StreamHandle) -> int:
        ctx = self.contexts[stream.context_id]
        return self._read_semaphore(ctx.space_id, stream.sync_vaddr)

    def stream_condition(self, stream: StreamHandle, value: int) -> SemaphoreAtLeast:
        ctx = self.contexts[stream.context_id]
        return SemaphoreAtLeast(ctx.space_id, stream.sync_vaddr, value)

    def request_inference(self, latency: float) -> TimeReached:
        """One shared off-device inference queue: requests serialize FIFO."""
        start = max(self.clock, self._infer_busy_until)
        finish = start + latency
        self._infer_busy_until = finish
        self._log("inference", None, None, None, start=start, finish=finish)
        return TimeReached(finish)

    def spawn(self, gen) -> _Process:
        proc = _Process(len(self.processes), gen)
        self.processes.append(proc)
        return proc

    def _run_ready_processes(self) -> bool:
        ran_any = False
        progressed = True
        while progressed:
            progressed = False
            for proc in self.processes:
                if proc.done:
                    continue
                cond = proc.condition
                if cond is not None and not cond.satisfied(self):
                    continue
                proc.condition = None
                try:
                    proc.condition = next(proc.gen)
                except StopIteration:
                    proc.done = True
                else:
                    if proc.condition is not None and not isinstance(proc.condition, Condition):
                        raise TypeError("drivers must yield Condition objects")
                progressed = ran_any = True
        return ran_any

    def _next_timer(self) -> float | None:
        times = [p.condition.time for p in self.processes
                 if not p.done and isinstance(p.condition, TimeReached)
                 and p.condition.time > self.clock + _EPS]
        return min(times) if times else None

    # ------------------------------------------------------------------
    # scheduling

    def _tsg_runnable(self, tsg_id: int) -> bool:
        return any(self.channels[cid].pending and not self.channels[cid].faulted
                   for cid in self.tsgs[tsg_id].channel_ids)

    def _any_runnable(self) -> bool:
        return any(self._tsg_runnable(t) for t in self._tsg_order)

    def _next_runnable_tsg(self) -> TimesliceGroup | None:
        n = len(self._tsg_order)
        for step in range(1, n + 1):
            pos = (self._rr_index + step) % n
            tsg_id = self._tsg_order[pos]
            if self._tsg_runnable(tsg_id):
                self._rr_index = pos
                return self.tsgs[tsg_id]
        return None

    def run(self, until=None) -> MetricsTrace:
        """Process events until idle (or `until(engine)` turns true)."""
        if self._running:
            raise EngineError("run is not reentrant")
        self._running = True
        try:
            self._run_ready_processes()
            while True:
                if until is not None and until(self):
                    break
                if self._run_window():
                    continue
                self._run_ready_processes()
                if until is not None and until(self):
                    break
                if self._any_runnable():
                    continue
                deadline = self._next_timer()
                if deadline is not None:
                    if deadline > self.clock:
                        self.trace.segments.append((self.clock, deadline, 0.0, 0.0, None))
                        self.clock = deadline
                    self._run_ready_processes()
                    continue
                break
        finally:
            self._running = False
        self.trace.makespan = self.clock
        self.trace.stalled = sorted(p.pid for p in self.processes if not p.done)
        return self.trace

    def run_until_idle(self) -> MetricsTrace:
        return self.run()

    def _run_window(self) -> bool:
        if not self._tsg_order:
            return False
        tsg = self._next_runnable_tsg()
        if tsg is None:
            return False
        penalty = self.config.context_switch_penalty
        if penalty and self._last_tsg is not None and self._last_tsg != tsg.id:
            t = self.clock + penalty
            self.trace.segments.append((self.clock, t, 0.0, 0.0, None))
            self.clock = t
        self._last_tsg = tsg.id
        start = self.clock
        expiry = start + tsg.quantum
        inflight: dict[int, _Inflight] = {}
        while True:
            if self.clock < expiry - _EPS:
                self._launch_ready(tsg, inflight)
            if not inflight:
                break
            flights = inflight.values()
            stretch = max(sum(f.cmd.compute_frac for f in flights) / self.config.compute_capacity,
                          sum(f.cmd.graphics_frac for f in flights) / self.config.graphics_capacity,
                          1.0)
            step = min(f.remaining for f in flights) * stretch
            t_next = self.clock + step
            deadline = self._next_timer()
            timer_cut = deadline is not None and deadline < t_next - _EPS
            if timer_cut:
                t_next = deadline
            dt = t_next - self.clock
            if dt > 0:
                cu = sum(f.cmd.compute_frac for f in flights) / stretch / self.config.compute_capacity
                gu = sum(f.cmd.graphics_frac for f in flights) / stretch / self.config.graphics_capacity
                self.trace.segments.append((self.clock, t_next, cu, gu, tsg.id))
                progress = dt / stretch
                for f in flights:
                    f.remaining -= progress
            self.clock = t_next
            if not timer_cut:
                done_ids = sorted(cid for cid, f in inflight.items()
                                  if f.remaining <= _EPS)
                for cid in done_ids:
                    flight = inflight.pop(cid)
                    self._finish_command(self.channels[cid], flight.cmd)
            self._run_ready_processes()
        self.trace.windows.append((tsg.id, start, self.clock))
        return True

    def _launch_ready(self, tsg: TimesliceGroup, inflight: dict):
        """Start head commands on every pending channel of the active group.
        Loops because zero-duration completions can wake drivers that submit
        more work eligible to start at the same instant."""
        while True:
            progressed = False
            for cid in tsg.channel_ids:
                ch = self.channels[cid]
                if ch.faulted or cid in inflight or not ch.pending:
                    continue
                cmd = self._next_timed_command(ch)
                if cmd is None:
                    continue
                inflight[cid] = _Inflight(cmd.base_duration, cmd)
                self._log("exec_start", ch.id, tsg.id, ch.active_entry.stream_id,
                          kind=cmd.kind.value, seq=ch.active_entry.seq)
                progressed = True
            if self._run_ready_processes():
                progressed = True
            if not progressed:
                return

    def _next_timed_command(self, ch: Channel) -> GpuCommand | None:
        """Advance the channel to its next timed command, executing
        zero-duration commands inline. Returns None when the channel has
        nothing runnable (drained, or just faulted)."""
        while True:
            if ch.active_entry is None:
                if ch.userd.get >= ch.userd.put:
                    ch.pending = False
                    return None
                ch.active_entry = ch.ring.slots[ch.userd.get % ch.ring.capacity]
                ch.active_index = 0
            entry = ch.active_entry
            if ch.active_index >= len(entry.buffer):
                self._finish_buffer(ch, entry)
                continue
            cmd = entry.buffer[ch.active_index]
            fault = self._start_command(ch, cmd)
            if fault is not None:
                self._record_fault(ch, fault)
                return None
            if cmd.base_duration <= 0:
                self._apply_effects(ch, cmd)
                ch.active_index += 1
                continue
            return cmd

    def _finish_command(self, ch: Channel, cmd: GpuCommand):
        entry = ch.active_entry
        self._log("exec_end", ch.id, ch.tsg_id, entry.stream_id, kind=cmd.kind.value,
                  seq=entry.seq)
        ch.active_index += 1
        # trailing zero-duration commands (semaphore writes) flush with the
        # completing command even if the slice has already expired
        while ch.active_index < len(entry.buffer):
            nxt = entry.buffer[ch.active_index]
            if nxt.base_duration > 0:
                break
            fault = self._start_command(ch, nxt)
            if fault is not None:
                self._record_fault(ch, fault)
                return
            self._apply_effects(ch, nxt)
            ch.active_index += 1
        if ch.active_index >= len(entry.buffer):
            self._finish_buffer(ch, entry)

    def _finish_buffer(self, ch: Channel, entry: GpFifoEntry):
        ch.userd.get += 1
        ch.active_entry = None
        ch.active_index = 0
        ch.pending = ch.userd.get < ch.userd.put
        self._log("buffer_complete", ch.id, ch.tsg_id, entry.stream_id, seq=entry.seq)

    def _start_command(self, ch: Channel, cmd: GpuCommand) -> FaultRecord | None:
        ctx = self.contexts[ch.context_id]
        if cmd.kind is CommandKind.KERNEL_DISPATCH:
            if ctx.kind is ContextKind.GRAPHICS and ch.compute_config is None:
                return FaultRecord("execution_fault", ch.id, self.clock,
                                   detail="kernel dispatch on a channel without compute state")
        elif cmd.kind is CommandKind.GRAPHICS_DRAW:
            if not ctx.fixed_function_ready:
                return FaultRecord("execution_fault", ch.id, self.clock,
                                   detail="draw without fixed-function hardware state")
        space = self.memory.spaces[ctx.space_id]
        for va in cmd.touched_vaddrs:
            try:
                self.memory.translate(space, va)
            except PageFault as pf:
                return FaultRecord("page_fault", ch.id, self.clock, vaddr=pf.vaddr,
                                   detail=f"walk stopped at level {pf.level}")
        if cmd.kind is CommandKind.SEMAPHORE_WRITE:
            try:
                self.memory.translate(space, cmd.sem_vaddr)
            except PageFault as pf:
                return FaultRecord("page_fault", ch.id, self.clock, vaddr=pf.vaddr,
                                   detail=f"walk stopped at level {pf.level}")
        return None

    def _apply_effects(self, ch: Channel, cmd: GpuCommand):
        if cmd.kind is CommandKind.SEMAPHORE_WRITE:
            ctx = self.contexts[ch.context_id]
            page, off = self.memory.translate(self.memory.spaces[ctx.space_id],
                                              cmd.sem_vaddr)
            self.phys_mem[(page.id, off)] = cmd.sem_value
            stream_id = ch.active_entry.stream_id if ch.active_entry else None
            self._log("semaphore", ch.id, ch.tsg_id, stream_id, value=cmd.sem_value,
                      vaddr=cmd.sem_vaddr)
        elif cmd.kind is CommandKind.INIT_COMPUTE:
            ch.compute_config = cmd.config

    def _record_fault(self, ch: Channel, fault: FaultRecord):
        ch.faulted = True
        self.trace.faults.append(fault)
        stream_id = ch.active_entry.stream_id if ch.active_entry else None
        self._log("fault", ch.id, ch.tsg_id, stream_id, kind=fault.kind,
                  vaddr=fault.vaddr, detail=fault.detail)

    def reset_channel(self, ch: Channel):
        """Clear a fault, discard the faulting buffer, resume at the next entry."""
        ch.faulted = False
        if ch.active_entry is not None:
            ch.userd.get += 1
            ch.active_entry = None
            ch.active_index = 0
        ch.pending = ch.userd.get < ch.userd.put


def run_until_idle(engine: Engine) -> MetricsTrace:
    return engine.run()


def sample_utilization(engine: Engine, sample_dt: float | None = None) -> list[dict]:
    dt = sample_dt if sample_dt is not None else engine.config.utilization_sample_dt
    return engine.trace.utilization_samples(dt)
