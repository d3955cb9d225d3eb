"""Online rule learning on the smoothed failure probability.

Aggregated windows stream in next to the detector's z value. While z is
rising through the warning band the windows are buffered as failure
candidates; everything else accrues to a history of normal data. When a
failure is confirmed (z above the failure threshold and still rising) the
buffer-vs-history dataset is used to validate the current rules, refitting
perfect-fit decision trees whenever validation empties the rule set. Once z
stops rising the rules are emitted for that failure, the buffer moves to a
global pool, and at end of stream a global rule set is fit on that pool
against the full history.

Trees are grown greedily on Gini impurity with midpoint thresholds between
consecutive distinct feature values, to a perfect fit. Ties break toward the
lowest feature index, then the lowest threshold, so induction is fully
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, InductionError, OrderingError
from .windowing import AggregatedWindow, feature_names, feature_vector

FAILURE = "failure"
NO_FAILURE = "no_failure"


@dataclass(frozen=True)
class Predicate:
    feature: str
    comparator: str  # "<=" or ">"
    threshold: float

    def __str__(self) -> str:
        symbol = "≤" if self.comparator == "<=" else ">"
        return f"{self.feature} {symbol} {self.threshold:g}"


@dataclass
class TreeNode:
    n_failure: int
    n_no_failure: int
    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None  # feature value <= threshold
    right: "TreeNode | None" = None  # feature value > threshold
    label: str | None = None

    @property
    def is_leaf(self) -> bool:
        return self.label is not None

    @property
    def total(self) -> int:
        return self.n_failure + self.n_no_failure


@dataclass(frozen=True)
class LabeledSet:
    """Feature matrix plus binary labels (True = failure)."""

    x: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=bool)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise DataError(f"labeled set shapes do not line up: {x.shape} vs {y.shape}")
        if x.shape[1] != len(self.feature_names):
            raise DataError(
                f"{x.shape[1]} feature columns but {len(self.feature_names)} names"
            )

    @property
    def n_examples(self) -> int:
        return int(self.x.shape[0])

    def separable(self) -> bool:
        """False iff identical feature vectors carry conflicting labels."""
        order = np.lexsort(self.x.T)
        xs = self.x[order]
        ys = self.y[order]
        same = np.all(xs[1:] == xs[:-1], axis=1)
        return not np.any(same & (ys[1:] != ys[:-1]))


class DecisionTree:
    """A perfect-fit axis-aligned tree over the aggregation vocabulary."""

    def __init__(self, root: TreeNode, feature_names: tuple[str, ...]):
        self.root = root
        self.feature_names = tuple(feature_names)

    def predict_vector(self, vector: np.ndarray) -> str:
        node = self.root
        while not node.is_leaf:
            node = node.right if vector[node.feature] > node.threshold else node.left
        return node.label

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.array([self.predict_vector(row) == FAILURE for row in np.atleast_2d(x)])

    @property
    def depth(self) -> int:
        def walk(node):
            if node.is_leaf:
                return 0
            return 1 + max(walk(node.left), walk(node.right))

        return walk(self.root)

    def structure(self):
        def walk(node):
            if node.is_leaf:
                return ("leaf", node.label)
            return ("split", node.feature, node.threshold, walk(node.left), walk(node.right))

        return walk(self.root)

    def __eq__(self, other) -> bool:
        return isinstance(other, DecisionTree) and self.structure() == other.structure()

    def __hash__(self) -> int:
        return hash(self.structure())


@dataclass(frozen=True)
class RuleSet:
    trees: tuple[DecisionTree, ...]
    provenance: str


@dataclass(frozen=True)
class NodeSupport:
    depth: int
    description: str
    n_failure: int
    n_no_failure: int
    fraction_of_parent: float
    near_singleton: bool


def collect_examples(buffer_vectors, history_vectors, names) -> LabeledSet:
    """Stack buffered (failure) and history (no-failure) feature vectors."""
    buffer_vectors = list(buffer_vectors)
    history_vectors = list(history_vectors)
    if not buffer_vectors:
        raise ValueError("cannot collect examples from an empty buffer")
    x = np.vstack(buffer_vectors + history_vectors) if history_vectors else np.vstack(buffer_vectors)
    y = np.zeros(len(buffer_vectors) + len(history_vectors), dtype=bool)
    y[: len(buffer_vectors)] = True
    return LabeledSet(x, y, names)


def _gini_pair(n_fail, n_no):
    total = n_fail + n_no
    p_fail = n_fail / total
    p_no = n_no / total
    return 1.0 - p_fail * p_fail - p_no * p_no


def _best_split(x: np.ndarray, y: np.ndarray, allowed) -> tuple[int, float] | None:
    """Greedy Gini split; first-found wins ties (lowest feature, lowest threshold)."""
    n = x.shape[0]
    n_fail = int(y.sum())
    n_no = n - n_fail
    parent = _gini_pair(n_fail, n_no)
    best = None
    best_gain = 0.0
    for f in allowed:
        values = x[:, f]
        order = np.argsort(values, kind="stable")
        sv = values[order]
        sy = y[order]
        boundaries = np.nonzero(sv[1:] > sv[:-1])[0]
        if boundaries.size == 0:
            continue
        prefix_fail = np.cumsum(sy)
        n_left = boundaries + 1
        left_fail = prefix_fail[boundaries]
        left_no = n_left - left_fail
        right_fail = n_fail - left_fail
        right_no = n_no - left_no
        n_right = n - n_left
        gini_left = 1.0 - (left_fail / n_left) ** 2 - (left_no / n_left) ** 2
        gini_right = 1.0 - (right_fail / n_right) ** 2 - (right_no / n_right) ** 2
        weighted = (n_left * gini_left + n_right * gini_right) / n
        gains = parent - weighted
        i = int(np.argmax(gains))  # argmax keeps the lowest threshold on ties
        gain = float(gains[i])
        threshold = float((sv[boundaries[i]] + sv[boundaries[i] + 1]) / 2.0)
        candidate = (gain, f, threshold)
        if best is None or gain > best_gain:
            best = (f, threshold)
            best_gain = gain
    return best


def fit_tree(labeled: LabeledSet, allowed_features=None) -> DecisionTree:
    """Grow a tree until every training example is classified correctly."""
    allowed = (
        tuple(range(len(labeled.feature_names))) if allowed_features is None else tuple(allowed_features)
    )
    if not allowed:
        raise ConfigError("no features left to split on")

    def grow(idx: np.ndarray) -> TreeNode:
        ys = labeled.y[idx]
        n_fail = int(ys.sum())
        n_no = int(idx.size - n_fail)
        node = TreeNode(n_failure=n_fail, n_no_failure=n_no)
        if n_fail == 0 or n_no == 0:
            node.label = FAILURE if n_no == 0 else NO_FAILURE
            return node
        split = _best_split(labeled.x[idx], ys, allowed)
        if split is None:
            raise InductionError(
                "labeled set is not separable: identical feature vectors carry both labels"
            )
        f, threshold = split
        node.feature = f
        node.threshold = threshold
        go_left = labeled.x[idx, f] <= threshold
        node.left = grow(idx[go_left])
        node.right = grow(idx[~go_left])
        return node

    return DecisionTree(grow(np.arange(labeled.n_examples)), labeled.feature_names)


def _perfect_stump(labeled: LabeledSet, f: int) -> DecisionTree | None:
    """Depth-1 tree on feature f if one midpoint separates the classes, else None."""
    fail_vals = labeled.x[labeled.y, f]
    no_vals = labeled.x[~labeled.y, f]
    if fail_vals.size == 0 or no_vals.size == 0:
        return None
    if no_vals.max() < fail_vals.min():
        threshold = float((no_vals.max() + fail_vals.min()) / 2.0)
        left_label, right_label = NO_FAILURE, FAILURE
    elif fail_vals.max() < no_vals.min():
        threshold = float((fail_vals.max() + no_vals.min()) / 2.0)
        left_label, right_label = FAILURE, NO_FAILURE
    else:
        return None
    n_fail = int(fail_vals.size)
    n_no = int(no_vals.size)
    root = TreeNode(n_failure=n_fail, n_no_failure=n_no, feature=f, threshold=threshold)
    if left_label == FAILURE:
        root.left = TreeNode(n_failure=n_fail, n_no_failure=0, label=FAILURE)
        root.right = TreeNode(n_failure=0, n_no_failure=n_no, label=NO_FAILURE)
    else:
        root.left = TreeNode(n_failure=0, n_no_failure=n_no, label=NO_FAILURE)
        root.right = TreeNode(n_failure=n_fail, n_no_failure=0, label=FAILURE)
    return DecisionTree(root, labeled.feature_names)


def candidate_trees(labeled: LabeledSet, max_trees: int = 8, allowed_features=None) -> list[DecisionTree]:
    """The greedy tree plus every perfectly separating single-feature stump.

    Structural duplicates are removed; at most ``max_trees`` are returned.
    """
    if max_trees < 1:
        raise ConfigError(f"max_trees must be >= 1, got {max_trees}")
    allowed = (
        tuple(range(len(labeled.feature_names))) if allowed_features is None else tuple(allowed_features)
    )
    trees = [fit_tree(labeled, allowed)]
    if max_trees > 1:
        for f in allowed:
            stump = _perfect_stump(labeled, f)
            if stump is not None:
                trees.append(stump)
    unique: list[DecisionTree] = []
    seen = set()
    for tree in trees:
        key = tree.structure()
        if key not in seen:
            seen.add(key)
            unique.append(tree)
    return unique[:max_trees]


def rule_covers(tree: DecisionTree, labeled: LabeledSet) -> bool:
    """True iff the tree classifies every labeled example correctly."""
    if labeled.n_examples == 0:
        return True
    return bool(np.array_equal(tree.predict(labeled.x), labeled.y))


def eval_rule(tree: DecisionTree, agg: AggregatedWindow) -> str:
    """Classify one aggregated window by root-to-leaf traversal (strict >)."""
    lookup = dict(zip(feature_names(agg.channels), feature_vector(agg)))
    node = tree.root
    while not node.is_leaf:
        name = tree.feature_names[node.feature]
        try:
            value = lookup[name]
        except KeyError:
            raise DataError(f"window lacks feature {name!r} required by the rule") from None
        node = node.right if value > node.threshold else node.left
    return node.label


def node_support(tree: DecisionTree, near_singleton_max: int = 2) -> list[NodeSupport]:
    """Per-node support report, sorted by depth; flags splits isolating few windows."""
    report = []

    def walk(node: TreeNode, depth: int, parent_total: int) -> None:
        if node.is_leaf:
            description = f"leaf: {node.label}"
            flagged = False
        else:
            description = str(
                Predicate(tree.feature_names[node.feature], ">", node.threshold)
            )
            flagged = min(node.left.total, node.right.total) <= near_singleton_max
        report.append(
            NodeSupport(
                depth=depth,
                description=description,
                n_failure=node.n_failure,
                n_no_failure=node.n_no_failure,
                fraction_of_parent=node.total / parent_total if parent_total else 0.0,
                near_singleton=flagged,
            )
        )
        if not node.is_leaf:
            walk(node.left, depth + 1, node.total)
            walk(node.right, depth + 1, node.total)

    walk(tree.root, 0, tree.root.total)
    report.sort(key=lambda r: r.depth)
    return report


def failure_paths(tree: DecisionTree) -> list[list[Predicate]]:
    """Root-to-leaf predicate conjunctions for every failure leaf."""
    paths: list[list[Predicate]] = []

    def walk(node: TreeNode, path: list[Predicate]) -> None:
        if node.is_leaf:
            if node.label == FAILURE:
                paths.append(list(path))
            return
        name = tree.feature_names[node.feature]
        path.append(Predicate(name, "<=", node.threshold))
        walk(node.left, path)
        path.pop()
        path.append(Predicate(name, ">", node.threshold))
        walk(node.right, path)
        path.pop()

    walk(tree.root, [])
    return paths


def rule_text(tree: DecisionTree) -> str:
    """Human-readable disjunction of failure paths, e.g. ``a_max > 16.05 ⇒ Failure``."""
    paths = failure_paths(tree)
    if not paths:
        return "⊥ ⇒ Failure"
    clauses = []
    for path in paths:
        if not path:
            return "⊤ ⇒ Failure"
        conj = " ∧ ".join(str(p) for p in path)
        clauses.append(f"({conj})" if len(path) > 1 and len(paths) > 1 else conj)
    return " ∨ ".join(clauses) + " ⇒ Failure"


# --- the online state machine ---------------------------------------------


@dataclass(frozen=True)
class StateChange:
    time: np.datetime64
    previous: str
    current: str


@dataclass(frozen=True)
class RulesEmitted:
    time: np.datetime64
    failure_id: str
    rules: RuleSet


@dataclass(frozen=True)
class InductionFailed:
    time: np.datetime64
    reason: str


@dataclass
class HistoryEntry:
    time: np.datetime64
    vector: np.ndarray
    during_failure: bool  # audit flag: appended while z was above the failure threshold


class RuleLearner:
    """Streaming consumer of (z, aggregated window) pairs.

    Strictly sequential, one instance per stream. ``finalize_global`` fits the
    end-of-stream rule set over all completed failures' windows.
    """

    def __init__(
        self,
        channels,
        warn_threshold: float = 0.1,
        fail_threshold: float = 0.5,
        exclude_channels=(),
        max_trees: int = 8,
        max_history: int | None = None,
        seed: int = 0,
    ):
        if not 0 < warn_threshold < fail_threshold <= 1:
            raise ConfigError(
                f"require 0 < warn < fail <= 1, got warn={warn_threshold} fail={fail_threshold}"
            )
        if max_history is not None and max_history < 1:
            raise ConfigError(f"max_history must be >= 1, got {max_history}")
        self.channels = tuple(channels)
        unknown = [c for c in exclude_channels if c not in self.channels]
        if unknown:
            raise ConfigError(f"cannot exclude unknown channels {unknown}")
        self.feature_names = feature_names(self.channels)
        excluded = set(exclude_channels)
        self.allowed_features = tuple(
            i
            for i, name in enumerate(self.feature_names)
            if name.rsplit("_", 1)[0] not in excluded
        )
        if not self.allowed_features:
            raise ConfigError("excluding these channels leaves no rule features")
        self.warn_threshold = warn_threshold
        self.fail_threshold = fail_threshold
        self.max_trees = max_trees
        self.max_history = max_history
        self.history: list[HistoryEntry] = []
        self.buffer: list[tuple[np.datetime64, np.ndarray]] = []
        self.rules: list[DecisionTree] = []
        self.global_buffer: list[np.ndarray] = []
        self.z_prev = 0.0
        self._state = STATE_NORMAL
        self._last_time = None
        self._episodes = 0
        self._history_seen = 0
        self._rng = np.random.default_rng(seed)

    def _add_history(self, time, vector, during_failure: bool) -> None:
        entry = HistoryEntry(time, vector, during_failure)
        self._history_seen += 1
        if self.max_history is None or len(self.history) < self.max_history:
            self.history.append(entry)
        else:
            # uniform reservoir subsampling over everything seen so far
            j = int(self._rng.integers(0, self._history_seen))
            if j < self.max_history:
                self.history[j] = entry

    def _labeled(self) -> LabeledSet:
        return collect_examples(
            [v for _, v in self.buffer],
            [h.vector for h in self.history],
            self.feature_names,
        )

    def step(self, z: float, agg: AggregatedWindow) -> list:
        """Advance the state machine by one window; returns emitted events."""
        if agg.channels != self.channels:
            raise ConfigError(
                f"window channels {agg.channels} do not match learner channels {self.channels}"
            )
        if self._last_time is not None and agg.start_time <= self._last_time:
            raise OrderingError(f"window at {agg.start_time} is out of order")
        self._last_time = agg.start_time

        increasing = z > self.z_prev
        warning = z > self.warn_threshold
        failure = z > self.fail_threshold
        vector = feature_vector(agg)

        events: list = []
        state = STATE_FAILURE if failure else STATE_WARNING if warning else STATE_NORMAL
        if state != self._state:
            events.append(StateChange(agg.start_time, self._state, state))
            self._state = state

        completed_buffer: list[tuple[np.datetime64, np.ndarray]] = []
        if warning and increasing:
            self.buffer.append((agg.start_time, vector))
        else:
            completed_buffer = self.buffer
            self.buffer = []
            self._add_history(agg.start_time, vector, during_failure=failure)

        if failure:
            if increasing:
                labeled = self._labeled()
                try:
                    self.rules = self._update_rules(labeled)
                except InductionError as exc:
                    events.append(InductionFailed(agg.start_time, str(exc)))
                    self.rules = []
            else:
                if self.rules:
                    self._episodes += 1
                    events.append(
                        RulesEmitted(
                            agg.start_time,
                            f"failure-{self._episodes:03d}",
                            RuleSet(tuple(self.rules), f"failure-{self._episodes:03d}"),
                        )
                    )
                self.global_buffer.extend(v for _, v in completed_buffer)
                self.rules = []

        self.z_prev = z
        return events

    def _update_rules(self, labeled: LabeledSet) -> list[DecisionTree]:
        surviving = [t for t in self.rules if rule_covers(t, labeled)]
        if surviving:
            return surviving
        return candidate_trees(labeled, self.max_trees, self.allowed_features)

    def finalize_global(self) -> RuleSet:
        """Fit the global rule set on all completed failures vs the history."""
        if not self.global_buffer:
            return RuleSet((), "global")
        labeled = collect_examples(
            self.global_buffer, [h.vector for h in self.history], self.feature_names
        )
        trees = candidate_trees(labeled, self.max_trees, self.allowed_features)
        return RuleSet(tuple(trees), "global")
