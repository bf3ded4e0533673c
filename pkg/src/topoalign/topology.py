"""Alignment FSAs for the CTC and posterior-HMM topologies.

States emit labels. An arc ``(src, dst, kind)`` consumes one frame and emits
the label of ``dst``; the first frame enters through one of the initial
states. State ids follow the left-to-right order of alignment slots, so all
non-loop arcs point to a higher id.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import FormatError, TopologyError
from .lexicon import LabelInventory, Phoneme, Topology


class ArcKind(enum.IntEnum):
    LOOP = 0
    FORWARD = 1
    BLANK_SKIP = 2


BLANK_POS = -1
SILENCE_POS = -2


@dataclass(frozen=True, eq=False)
class AlignmentFsa:
    topology: Topology
    state_label: np.ndarray  # (S,) emitted label id per state
    state_pos: np.ndarray  # (S,) position in the phoneme sequence, or BLANK_POS / SILENCE_POS
    arc_src: np.ndarray
    arc_dst: np.ndarray
    arc_kind: np.ndarray
    initial: np.ndarray  # sorted state ids
    final: np.ndarray  # sorted state ids
    labels: tuple  # the phoneme label ids the FSA was built from

    @property
    def num_states(self) -> int:
        return len(self.state_label)

    @property
    def num_arcs(self) -> int:
        return len(self.arc_src)

    def min_path_length(self) -> int:
        """Shortest accepted path, in frames (BFS over the state graph)."""
        dist = np.full(self.num_states, -1)
        frontier = list(self.initial)
        for s in frontier:
            dist[s] = 1
        adj = [[] for _ in range(self.num_states)]
        for s, d in zip(self.arc_src, self.arc_dst):
            if s != d:
                adj[s].append(d)
        i = 0
        while i < len(frontier):
            s = frontier[i]
            i += 1
            for d in adj[s]:
                if dist[d] < 0:
                    dist[d] = dist[s] + 1
                    frontier.append(d)
        reach = dist[self.final]
        reach = reach[reach > 0]
        return int(reach.min()) if len(reach) else -1

    def incoming(self):
        """Padded incoming-arc table ``(src, arc_index)`` of shape (S, K), sorted by src.

        Padding entries use src 0 and arc index -1.
        """
        cached = self.__dict__.get("_incoming")
        if cached is not None:
            return cached
        per_state = [[] for _ in range(self.num_states)]
        for a, (s, d) in enumerate(zip(self.arc_src, self.arc_dst)):
            per_state[d].append((int(s), a))
        width = max(1, max((len(p) for p in per_state), default=1))
        src = np.zeros((self.num_states, width), dtype=np.int64)
        arc = np.full((self.num_states, width), -1, dtype=np.int64)
        for d, items in enumerate(per_state):
            for k, (s, a) in enumerate(sorted(items)):
                src[d, k] = s
                arc[d, k] = a
        object.__setattr__(self, "_incoming", (src, arc))
        return src, arc

    def outgoing(self):
        cached = self.__dict__.get("_outgoing")
        if cached is not None:
            return cached
        per_state = [[] for _ in range(self.num_states)]
        for a, (s, d) in enumerate(zip(self.arc_src, self.arc_dst)):
            per_state[s].append((int(d), a))
        width = max(1, max((len(p) for p in per_state), default=1))
        dst = np.zeros((self.num_states, width), dtype=np.int64)
        arc = np.full((self.num_states, width), -1, dtype=np.int64)
        for s, items in enumerate(per_state):
            for k, (d, a) in enumerate(sorted(items)):
                dst[s, k] = d
                arc[s, k] = a
        object.__setattr__(self, "_outgoing", (dst, arc))
        return dst, arc

    def dump(self, out: TextIO | None = None) -> str:
        lines = [f"I {s}" for s in self.initial]
        for s, d, k in zip(self.arc_src, self.arc_dst, self.arc_kind):
            lines.append(f"{s} {d} {self.state_label[d]} {ArcKind(k).name.lower()}")
        lines += [f"F {s}" for s in self.final]
        text = "\n".join(lines) + "\n"
        if out is not None:
            out.write(text)
        return text


def _finish(topology, state_label, state_pos, arcs, initial, final, labels) -> AlignmentFsa:
    arcs = sorted(arcs, key=lambda a: (a[0], a[1]))
    arr = np.array(arcs, dtype=np.int64).reshape(-1, 3)
    return AlignmentFsa(
        topology=topology,
        state_label=np.asarray(state_label, dtype=np.int64),
        state_pos=np.asarray(state_pos, dtype=np.int64),
        arc_src=arr[:, 0].copy(),
        arc_dst=arr[:, 1].copy(),
        arc_kind=arr[:, 2].copy(),
        initial=np.array(sorted(initial), dtype=np.int64),
        final=np.array(sorted(final), dtype=np.int64),
        labels=tuple(labels),
    )


def _label_ids(phonemes, inventory: LabelInventory) -> list:
    ids = []
    for p in phonemes:
        if isinstance(p, Phoneme):
            ids.append(inventory.index(p))
        else:
            p = int(p)
            if not 0 <= p < inventory.special_id:
                raise TopologyError(f"label id {p} is not a phoneme of the inventory")
            ids.append(p)
    return ids


def build_alignment_fsa_ctc(phonemes: Sequence, inventory: LabelInventory) -> AlignmentFsa:
    """Blank / label / blank ... lattice with label loops and skips over optional blanks."""
    if inventory.blank_id is None:
        raise TopologyError("CTC topology needs an inventory with a blank label")
    labels = _label_ids(phonemes, inventory)
    blank = inventory.blank_id
    m = len(labels)
    state_label, state_pos = [], []
    for i, lab in enumerate(labels):
        state_label += [blank, lab]
        state_pos += [BLANK_POS, i]
    state_label.append(blank)
    state_pos.append(BLANK_POS)
    arcs = []
    n = len(state_label)
    for s in range(n):
        arcs.append((s, s, ArcKind.LOOP))
        if s + 1 < n:
            arcs.append((s, s + 1, ArcKind.FORWARD))
    for i in range(m - 1):
        if labels[i] != labels[i + 1]:
            arcs.append((2 * i + 1, 2 * i + 3, ArcKind.BLANK_SKIP))
    initial = [0, 1] if m else [0]
    final = [n - 1, n - 2] if m else [0]
    return _finish(Topology.CTC, state_label, state_pos, arcs, initial, final, labels)


def build_alignment_fsa_phmm(
    phonemes: Sequence, inventory: LabelInventory, allow_silence: bool = True
) -> AlignmentFsa:
    """One loop/forward state per phoneme; optional silence at utterance edges and word ends."""
    if inventory.silence_id is None:
        raise TopologyError("HMM topology needs an inventory with a silence label")
    labels = _label_ids(phonemes, inventory)
    sil = inventory.silence_id
    m = len(labels)
    if m == 0 and not allow_silence:
        raise TopologyError("empty phoneme sequence needs allow_silence")
    state_label, state_pos = [], []
    phone_state = []
    between = {}  # phoneme position -> silence state following it
    if allow_silence:
        state_label.append(sil)
        state_pos.append(SILENCE_POS)
    for i, lab in enumerate(labels):
        phone_state.append(len(state_label))
        state_label.append(lab)
        state_pos.append(i)
        if allow_silence and inventory.is_eow(lab) and i < m - 1:
            between[i] = len(state_label)
            state_label.append(sil)
            state_pos.append(SILENCE_POS)
    if allow_silence and m:
        state_label.append(sil)
        state_pos.append(SILENCE_POS)
    n = len(state_label)

    arcs = [(s, s, ArcKind.LOOP) for s in range(n)]
    if m == 0:
        return _finish(Topology.PHMM, state_label, state_pos, arcs, [0], [0], labels)
    if allow_silence:
        arcs.append((0, phone_state[0], ArcKind.FORWARD))
    for i in range(m - 1):
        arcs.append((phone_state[i], phone_state[i + 1], ArcKind.FORWARD))
        if i in between:
            arcs.append((phone_state[i], between[i], ArcKind.FORWARD))
            arcs.append((between[i], phone_state[i + 1], ArcKind.FORWARD))
    initial = [phone_state[0]]
    final = [phone_state[-1]]
    if allow_silence:
        arcs.append((phone_state[-1], n - 1, ArcKind.FORWARD))
        initial.append(0)
        final.append(n - 1)
    return _finish(Topology.PHMM, state_label, state_pos, arcs, initial, final, labels)


def build_alignment_fsa(phonemes, inventory: LabelInventory, allow_silence: bool = True):
    if inventory.topology.uses_blank:
        return build_alignment_fsa_ctc(phonemes, inventory)
    return build_alignment_fsa_phmm(phonemes, inventory, allow_silence)


def load_fsa_dump(source: TextIO | Iterable[str], topology=Topology.CTC, labels=()) -> AlignmentFsa:
    """Inverse of :meth:`AlignmentFsa.dump`; state positions are not recoverable and set to -1."""
    arcs, initial, final, state_label = [], [], [], {}
    for lineno, raw in enumerate(source, start=1):
        f = raw.split()
        if not f:
            continue
        try:
            if f[0] == "I":
                initial.append(int(f[1]))
            elif f[0] == "F":
                final.append(int(f[1]))
            else:
                s, d, lab = int(f[0]), int(f[1]), int(f[2])
                arcs.append((s, d, ArcKind[f[3].upper()]))
                state_label[d] = lab
        except (IndexError, ValueError, KeyError):
            raise FormatError(f"malformed FSA dump line {raw.strip()!r}", lineno) from None
    n = max([*state_label, *initial, *final], default=-1) + 1
    if any(s not in state_label for s in range(n)):
        raise FormatError("state without an incoming arc; label unknown")
    return _finish(
        Topology.parse(topology), [state_label[s] for s in range(n)], [-1] * n,
        arcs, initial, final, labels,
    )


@dataclass(frozen=True, eq=False)
class AlignmentPath:
    labels: np.ndarray
    states: np.ndarray | None = None
    blank_id: int | None = None
    silence_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.states is not None:
            states = np.asarray(self.states, dtype=np.int64)
            if states.shape != self.labels.shape:
                raise ValueError("labels and states differ in length")
            object.__setattr__(self, "states", states)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_states(cls, fsa: AlignmentFsa, states, inventory: LabelInventory) -> "AlignmentPath":
        states = np.asarray(states, dtype=np.int64)
        return cls(fsa.state_label[states], states, inventory.blank_id, inventory.silence_id)

    def is_accepted_by(self, fsa: AlignmentFsa) -> bool:
        if self.states is None or len(self.states) == 0:
            return False
        st = self.states
        if st[0] not in set(fsa.initial.tolist()) or st[-1] not in set(fsa.final.tolist()):
            return False
        if not np.array_equal(fsa.state_label[st], self.labels):
            return False
        arcs = set(zip(fsa.arc_src.tolist(), fsa.arc_dst.tolist()))
        return all((int(a), int(b)) in arcs for a, b in zip(st[:-1], st[1:]))


def collapse_blanks(path: AlignmentPath) -> list:
    """Merge consecutive repeats, then drop blanks."""
    if path.blank_id is None:
        raise TopologyError("collapse_blanks needs a blank-based path")
    if path.silence_id is not None and np.any(path.labels == path.silence_id):
        raise TopologyError("path contains a silence label")
    out = []
    prev = None
    for lab in path.labels.tolist():
        if lab != prev and lab != path.blank_id:
            out.append(lab)
        prev = lab
    return out


def map_state_to_phoneme(path: AlignmentPath, t: int) -> int:
    """Label owned by the state aligned to frame ``t``."""
    if not 0 <= t < len(path.labels):
        raise IndexError(f"frame {t} out of range for a path of length {len(path.labels)}")
    return int(path.labels[t])


def remove_label_loops(path: AlignmentPath) -> AlignmentPath:
    """Keep the first frame of every run of a non-blank label, blank the rest.

    With CTC state layout (blank states at even ids) the replaced frames move
    to the blank state right after the label state.
    """
    if path.blank_id is None:
        raise TopologyError("remove_label_loops needs a blank-based path")
    labels = path.labels.copy()
    states = None if path.states is None else path.states.copy()
    src = path.labels
    for t in range(1, len(src)):
        same_state = path.states is None or path.states[t] == path.states[t - 1]
        if src[t] == src[t - 1] and src[t] != path.blank_id and same_state:
            labels[t] = path.blank_id
            if states is not None:
                states[t] = path.states[t] + 1
    return AlignmentPath(labels, states, path.blank_id, path.silence_id)
