"""Greedy hypercube search over binary enhancement states.

Each stage trains every state within a Hamming-distance threshold of the
current one (the current state included, so it keeps training) and adopts
the best validation loss. Candidates inherit the current model's
parameter tables and module weights; a freshly flipped-on slot gets a new
Xavier-initialized module, a flipped-off slot drops its weights. The
search stops when the adopted state equals the current one, or after
max_stages with the best-so-far result flagged.
"""

from __future__ import annotations

import dataclasses
import os
import pickle
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import optimize as opt
from .data_io import data_content_hash
from .errors import BadMagic, ChecksumMismatch, RefusedTooLarge, Truncated, VersionUnsupported
from .graph import CompGraph, EnhancedModel, EnhancementState, make_module, state_neighbors
from .neural import DEFAULT_HIDDEN

CHECKPOINT_MAGIC = b"NEAC"
CHECKPOINT_VERSION = 1


@dataclass
class SearchConfig:
    hamming_threshold: int = 1
    epochs_per_stage: int = 30
    max_modules: int | None = None
    fixed_bits: dict | None = None
    max_stages: int = 20
    improvement_rel: float = 1e-4  # candidates within this of the minimum count as tied
    hidden: tuple = DEFAULT_HIDDEN
    p_neural: int = 27


@dataclass
class StageRecord:
    current_state: EnhancementState
    candidate_states: list
    candidate_losses: list
    chosen_state: EnhancementState
    chosen_loss: float


@dataclass
class SearchTrace:
    stages: list = field(default_factory=list)
    budget_exceeded: bool = False

    @property
    def final_state(self):
        return self.stages[-1].chosen_state if self.stages else None

    def to_text(self):
        lines = []
        for k, st in enumerate(self.stages, 1):
            lines.append(f"stage {k}: current {st.current_state.to_string()}")
            for cand, loss in zip(st.candidate_states, st.candidate_losses):
                lines.append(f"  candidate {cand.to_string()} val_loss {loss:.6e}")
            lines.append(f"  chosen {st.chosen_state.to_string()} val_loss {st.chosen_loss:.6e}")
        state = self.final_state.to_string() if self.stages else "(none)"
        lines.append(
            f"final state {state} stages {len(self.stages)} budget_exceeded {self.budget_exceeded}"
        )
        return "\n".join(lines)


def select_candidate(states, losses, improvement_rel):
    """Index of the winning candidate.

    Everything within `improvement_rel` (relative) of the minimum loss is
    a tie; ties prefer fewer active modules, then lexicographic bits.
    Keeps the search from oscillating on sub-noise differences.
    """
    losses = np.asarray(losses, dtype=np.float64)
    lo = np.min(losses)
    cut = lo * (1.0 + improvement_rel) if np.isfinite(lo) else np.inf
    group = [i for i, l in enumerate(losses) if l <= cut]
    return min(group, key=lambda i: (states[i].count_ones(), states[i].bits, i))


def _initial_state(n_slots, fixed_bits):
    bits = [0] * n_slots
    for slot, v in (fixed_bits or {}).items():
        bits[slot] = int(v)
    return EnhancementState(tuple(bits))


def _build_candidate(current: opt.TrainableModel, cand_state, cfg: SearchConfig, seed, stage):
    tm = current.copy()
    modules = {}
    for slot, bit in enumerate(cand_state.bits):
        if not bit:
            continue
        if slot in tm.model.modules:
            modules[slot] = tm.model.modules[slot]  # continue training existing weights
        else:
            modules[slot] = make_module(
                tm.model.graph, slot, cfg.p_neural, opt.module_init_seed(seed, stage, slot), cfg.hidden
            )
    tm.model = EnhancedModel(tm.model.graph, cand_state, modules, cfg.p_neural).validate()
    return tm


def run_enhancement(
    graph: CompGraph,
    data,
    cfg: SearchConfig,
    tcfg: opt.TrainConfig,
    threads=1,
    checkpoint_dir=None,
    log_fn=None,
):
    """Full search from the all-zero state; returns (model, trace)."""
    if not data:
        raise ValueError("enhancement needs at least one sample set")
    train_td, val_td = opt.pack_samplesets(data, tcfg.val_fraction, tcfg.seed)
    state0 = _initial_state(graph.n_slots, cfg.fixed_bits)
    current = opt.TrainableModel.fresh(EnhancedModel(graph, state0, {}, cfg.p_neural), train_td.n_materials)
    for slot, bit in enumerate(state0.bits):
        if bit:
            current.model.modules[slot] = make_module(
                graph, slot, cfg.p_neural, opt.module_init_seed(tcfg.seed, 0, slot), cfg.hidden
            )
    current.model.validate()
    trace = SearchTrace()
    return _search_loop(
        current, trace, 1, graph, data, train_td, val_td, cfg, tcfg, threads, checkpoint_dir, log_fn
    )


def _search_loop(
    current, trace, start_stage, graph, data, train_td, val_td, cfg, tcfg, threads, checkpoint_dir, log_fn
):
    stage_tcfg = dataclasses.replace(tcfg, epochs_per_stage=cfg.epochs_per_stage)
    data_hash = data_content_hash(data)
    converged = False
    for stage in range(start_stage, cfg.max_stages + 1):
        states = state_neighbors(
            current.model.state, cfg.hamming_threshold, cfg.fixed_bits, cfg.max_modules
        )
        candidates = [_build_candidate(current, st, cfg, tcfg.seed, stage) for st in states]
        results = opt.train_jointly(candidates, train_td, val_td, stage_tcfg, log_fn, threads)
        losses = [r.val_loss for r in results]
        pick = select_candidate(states, losses, cfg.improvement_rel)
        record = StageRecord(current.model.state, states, losses, states[pick], losses[pick])
        trace.stages.append(record)
        stayed = states[pick] == current.model.state
        current = candidates[pick]
        if log_fn is not None:
            log_fn(
                f"stage {stage}: chose {record.chosen_state.to_string()} "
                f"val_loss {record.chosen_loss:.6e}"
            )
        if checkpoint_dir is not None:
            _write_stage_checkpoint(checkpoint_dir, stage, current, trace, cfg, tcfg, data_hash)
        if stayed:
            converged = True
            break
    trace.budget_exceeded = not converged
    return current, trace


# ---------------------------------------------------------------------------
# Checkpointing: versioned binary envelope around a pickled payload.

def _checkpoint_payload(stage, current: opt.TrainableModel, trace, cfg, tcfg, data_hash):
    return {
        "stage": stage,
        "model_name": current.model.graph.model_name,
        "state_bits": current.model.state.bits,
        "p_neural": current.model.p_neural,
        "analytical_raw": current.analytical_raw,
        "neural": current.neural,
        "modules": {
            slot: (m.dims, m.weights, m.biases, m.leaky_slope)
            for slot, m in current.model.modules.items()
        },
        "trace": trace,
        "cfg": cfg,
        "tcfg": tcfg,
        "data_hash": data_hash,
        "base_seed": tcfg.seed,
    }


def save_checkpoint(path, payload):
    blob = pickle.dumps(payload, protocol=4)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))


def load_checkpoint(path):
    with open(path, "rb") as f:
        head = f.read(16)
        if head[:4] != CHECKPOINT_MAGIC:
            raise BadMagic(f"{path}: not a checkpoint file")
        version, length = struct.unpack("<IQ", head[4:16])
        if version != CHECKPOINT_VERSION:
            raise VersionUnsupported(f"{path}: checkpoint version {version}")
        blob = f.read(length)
        tail = f.read(4)
    if len(blob) != length or len(tail) != 4:
        raise Truncated(f"{path}: checkpoint payload incomplete")
    (crc,) = struct.unpack("<I", tail)
    if crc != (zlib.crc32(blob) & 0xFFFFFFFF):
        raise ChecksumMismatch(f"{path}: checkpoint payload corrupted")
    return pickle.loads(blob)


def _write_stage_checkpoint(directory, stage, current, trace, cfg, tcfg, data_hash):
    os.makedirs(directory, exist_ok=True)
    payload = _checkpoint_payload(stage, current, trace, cfg, tcfg, data_hash)
    save_checkpoint(os.path.join(directory, f"stage_{stage:03d}.neac"), payload)
    save_checkpoint(os.path.join(directory, "latest.neac"), payload)


def resume_enhancement(checkpoint_path, graph: CompGraph, data, threads=1, checkpoint_dir=None, log_fn=None):
    """Continue a search from a stage checkpoint.

    The stored data hash must match `data`; with the same seeds this
    reproduces exactly what the uninterrupted run would have produced.
    """
    payload = load_checkpoint(checkpoint_path)
    if payload["model_name"] != graph.model_name:
        raise ChecksumMismatch(
            f"checkpoint was taken for model {payload['model_name']!r}, not {graph.model_name!r}"
        )
    if payload["data_hash"] != data_content_hash(data):
        raise ChecksumMismatch("training data does not match the checkpointed run")
    cfg, tcfg = payload["cfg"], payload["tcfg"]
    from .neural import NeuralModule

    modules = {
        slot: NeuralModule(dims, [w.copy() for w in ws], [b.copy() for b in bs], slope)
        for slot, (dims, ws, bs, slope) in payload["modules"].items()
    }
    model = EnhancedModel(
        graph, EnhancementState(tuple(payload["state_bits"])), modules, payload["p_neural"]
    ).validate()
    current = opt.TrainableModel(model, payload["analytical_raw"].copy(), payload["neural"].copy())
    trace = payload["trace"]
    if trace.stages and trace.stages[-1].chosen_state == trace.stages[-1].current_state:
        return current, trace  # already converged
    train_td, val_td = opt.pack_samplesets(data, tcfg.val_fraction, tcfg.seed)
    return _search_loop(
        current, trace, payload["stage"] + 1, graph, data, train_td, val_td,
        cfg, tcfg, threads, checkpoint_dir, log_fn,
    )


# ---------------------------------------------------------------------------
# Naive full enumeration, kept as an oracle for small graphs.

@dataclass
class ExhaustiveResult:
    best_state: EnhancementState
    states: list
    losses: list


def exhaustive_search(graph: CompGraph, data, tcfg: opt.TrainConfig, cfg: SearchConfig | None = None, threads=1):
    """Train every one of the 2^N states; only sensible for toy graphs."""
    if graph.n_slots > 6:
        raise RefusedTooLarge(f"2^{graph.n_slots} states is past the enumeration limit (N <= 6)")
    cfg = cfg or SearchConfig()
    train_td, val_td = opt.pack_samplesets(data, tcfg.val_fraction, tcfg.seed)
    base = opt.TrainableModel.fresh(
        EnhancedModel(graph, EnhancementState.zeros(graph.n_slots), {}, cfg.p_neural),
        train_td.n_materials,
    )
    states = [EnhancementState(bits) for bits in _all_bits(graph.n_slots)]
    candidates = [_build_candidate(base, st, cfg, tcfg.seed, 0) for st in states]
    results = opt.train_jointly(candidates, train_td, val_td, tcfg, None, threads)
    losses = [r.val_loss for r in results]
    best = int(np.argmin(losses))  # ties resolve to the lexicographically first state
    return ExhaustiveResult(states[best], states, losses)


def _all_bits(n):
    from itertools import product

    return list(product((0, 1), repeat=n))
