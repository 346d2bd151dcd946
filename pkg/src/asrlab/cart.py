"""CART state tying: greedy decision-tree clustering of triphone states.

Items are (center, left, right, state_pos) keys with pooled diagonal-Gaussian
sufficient statistics; splits maximize the single-Gaussian log-likelihood
gain of asking one phonetic question.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STAT_VAR_FLOOR = 1e-3


@dataclass(frozen=True)
class TriphoneState:
    center: str
    left: str
    right: str
    state_pos: int


@dataclass
class SuffStats:
    n: float
    s1: np.ndarray  # sum of features
    s2: np.ndarray  # sum of squared features

    @staticmethod
    def zero(d):
        return SuffStats(0.0, np.zeros(d), np.zeros(d))

    def add(self, other):
        return SuffStats(self.n + other.n, self.s1 + other.s1, self.s2 + other.s2)

    @staticmethod
    def from_frames(frames):
        frames = np.atleast_2d(frames)
        return SuffStats(float(frames.shape[0]), frames.sum(axis=0), (frames**2).sum(axis=0))


def gaussian_loglik(stats: SuffStats):
    """Max-likelihood single diagonal Gaussian log-likelihood of pooled data."""
    if stats.n < 1e-12:
        return 0.0
    mu = stats.s1 / stats.n
    var = np.maximum(stats.s2 / stats.n - mu**2, STAT_VAR_FLOOR)
    return -0.5 * stats.n * float(np.sum(np.log(2 * np.pi * var) + 1.0))


@dataclass(frozen=True)
class Question:
    """Set-membership test on one context field, or a state-position test."""

    name: str
    fieldname: str  # left | right | center | state_pos
    values: frozenset

    def ask(self, item: TriphoneState):
        return getattr(item, self.fieldname) in self.values


def default_questions(phones, state_positions=(0, 1, 2)):
    """Generic question inventory: singleton phone sets per context field,
    plus state-position questions."""
    qs = []
    for ph in sorted(phones):
        for fieldname in ("center", "left", "right"):
            qs.append(Question(f"{fieldname}={ph}", fieldname, frozenset([ph])))
    for pos in state_positions:
        qs.append(Question(f"pos={pos}", "state_pos", frozenset([pos])))
    return qs


def phone_class_questions(phone_classes, state_positions=(0, 1, 2)):
    """Questions from named phone classes: {'vowel': {...}, ...}."""
    qs = []
    for name, members in sorted(phone_classes.items()):
        for fieldname in ("center", "left", "right"):
            qs.append(Question(f"{fieldname}in{name}", fieldname, frozenset(members)))
    for pos in state_positions:
        qs.append(Question(f"pos={pos}", "state_pos", frozenset([pos])))
    return qs


@dataclass
class CartNode:
    question: Question = None
    yes: "CartNode" = None
    no: "CartNode" = None
    leaf_id: int = -1

    @property
    def is_leaf(self):
        return self.question is None


@dataclass
class CartTree:
    root: CartNode
    n_leaves: int

    def lookup(self, item: TriphoneState) -> int:
        node = self.root
        while not node.is_leaf:
            node = node.yes if node.question.ask(item) else node.no
        return node.leaf_id

    def leaf_of(self, center, left, right, state_pos):
        return self.lookup(TriphoneState(center, left, right, state_pos))

    def to_dict(self):
        def conv(node):
            if node.is_leaf:
                return {"leaf": node.leaf_id}
            return {
                "q": {"name": node.question.name, "field": node.question.fieldname,
                      "values": sorted(node.question.values,
                                       key=str)},
                "yes": conv(node.yes),
                "no": conv(node.no),
            }

        return {"tree": conv(self.root), "n_leaves": self.n_leaves}

    @staticmethod
    def from_dict(d):
        def conv(nd):
            if "leaf" in nd:
                return CartNode(leaf_id=nd["leaf"])
            q = nd["q"]
            vals = frozenset(q["values"]) if q["field"] != "state_pos" else frozenset(int(v) for v in q["values"])
            return CartNode(Question(q["name"], q["field"], vals), conv(nd["yes"]), conv(nd["no"]))

        return CartTree(conv(d["tree"]), d["n_leaves"])


def _pool(stats, items):
    d = next(iter(stats.values())).s1.size
    total = SuffStats.zero(d)
    for it in items:
        total = total.add(stats[it])
    return total


def best_split(stats, items, questions, min_count):
    """(gain, question, yes_items, no_items) of the best admissible question."""
    parent_ll = gaussian_loglik(_pool(stats, items))
    best = (0.0, None, None, None)
    for q in questions:
        yes = [it for it in items if q.ask(it)]
        if not yes or len(yes) == len(items):
            continue
        no = [it for it in items if not q.ask(it)]
        yes_stats, no_stats = _pool(stats, yes), _pool(stats, no)
        if yes_stats.n < min_count or no_stats.n < min_count:
            continue
        gain = gaussian_loglik(yes_stats) + gaussian_loglik(no_stats) - parent_ll
        if gain > best[0]:
            best = (gain, q, yes, no)
    return best


def cart_build(stats, questions, max_leaves, min_count=1.0, min_gain=1e-9):
    """Greedy top-down tree growing.

    stats: dict TriphoneState -> SuffStats.  Splitting stops at max_leaves,
    when the best gain falls below min_gain, or when a child would fall
    under min_count frames.
    """
    if not stats:
        raise ValueError("empty statistics")
    if not questions:
        raise ValueError("empty question set")
    root = CartNode()
    # frontier: list of (gain, order, node, items, split) kept sorted by gain
    frontier = []
    order = 0

    def push(node, items):
        nonlocal order
        gain, q, yes, no = best_split(stats, items, questions, min_count)
        frontier.append((gain, order, node, items, (q, yes, no)))
        order += 1

    push(root, sorted(stats.keys(), key=lambda it: (it.center, it.left, it.right, it.state_pos)))
    n_leaves = 1
    while n_leaves < max_leaves and frontier:
        frontier.sort(key=lambda e: (-e[0], e[1]))
        gain, _, node, items, (q, yes, no) = frontier.pop(0)
        if q is None or gain < min_gain:
            break
        node.question = q
        node.yes, node.no = CartNode(), CartNode()
        push(node.yes, yes)
        push(node.no, no)
        n_leaves += 1
    # deterministic leaf ids by left-to-right traversal
    next_id = 0

    def assign(node):
        nonlocal next_id
        if node.is_leaf:
            node.leaf_id = next_id
            next_id += 1
        else:
            assign(node.yes)
            assign(node.no)

    assign(root)
    return CartTree(root, next_id)


def accumulate_triphone_stats(corpus_items):
    """Build stats from (TriphoneState, frames) pairs (frames: [n, D])."""
    stats = {}
    for key, frames in corpus_items:
        s = SuffStats.from_frames(frames)
        stats[key] = stats[key].add(s) if key in stats else s
    return stats
