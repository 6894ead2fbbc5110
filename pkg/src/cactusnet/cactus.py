"""The CactusNet: a trunk of layer blocks that grows branches.

A pretrained network is cut into blocks at its tap points and becomes
the trunk.  Each non-root trunk node carries an applicability predictor
and a pair of thresholds.  Routing descends the tree: at every depth
the input goes to the candidate child with the highest predicted
applicability among those above their lower threshold; if none
qualifies the input is flagged nonobjective-unknown, and during growth
that spawns (or feeds) a branch.  The three-way known / objective-
unknown / nonobjective-unknown verdict is rendered at one configured
decision depth, with strictly-greater comparisons at both thresholds.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .applicability import ApplicabilityTable
from .data.manifest import SubsetLabel
from .errors import ConfigError, RoutingError, ShapeMismatchError
from .nn import Network, checkpoint_load, checkpoint_save, forward
from .seeding import derive_seed


class Verdict(Enum):
    KNOWN = "known"
    OBJECTIVE_UNKNOWN = "objective_unknown"
    NONOBJECTIVE_UNKNOWN = "nonobjective_unknown"


@dataclass(frozen=True)
class Thresholds:
    """Upper baseline q, lower baselines y1/y2, derived tau1/tau2."""
    q: float
    y1: float
    y2: float
    tau1: float
    tau2: float

    def to_dict(self):
        return {"q": self.q, "y1": self.y1, "y2": self.y2,
                "tau1": self.tau1, "tau2": self.tau2}

    @staticmethod
    def from_dict(d):
        return Thresholds(d["q"], d["y1"], d["y2"], d["tau1"], d["tau2"])


def compute_thresholds(q: float, y1: float, y2: float) -> Thresholds:
    """tau_n = q - (1/3)(q - y_n) for n in {1, 2}."""
    for name, v in (("q", q), ("y1", y1), ("y2", y2)):
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"baseline {name}={v} outside [0, 1]")
    tau1 = q - (q - y1) / 3.0
    tau2 = q - (q - y2) / 3.0
    return Thresholds(q, y1, y2, tau1, tau2)


def decide(app: float, thresholds: Thresholds) -> Verdict:
    """The three-way arm: app > tau1 is known, app > tau2 is objective
    unknown, anything else nonobjective unknown.  Exactly one arm fires;
    equality at a threshold falls to the lower arm."""
    if app > thresholds.tau1:
        return Verdict.KNOWN
    if app > thresholds.tau2:
        return Verdict.OBJECTIVE_UNKNOWN
    return Verdict.NONOBJECTIVE_UNKNOWN


def baseline_from_tables(table: ApplicabilityTable, labels, layer: int,
                         final_layer: int):
    """Pick (q, y1, y2) from a measured applicability table.

    q and y1 are the objective-known and objective-unknown subset means
    at ``layer``; y2 is the nonobjective-unknown mean at ``final_layer``.
    """
    def subset_mean(subset, at_layer):
        vals = [entry.app for (cid, lay), entry in table.entries.items()
                if lay == at_layer and labels[cid] is subset]
        if not vals:
            raise ConfigError(
                f"table has no {subset.value} entries at layer {at_layer}")
        return math.fsum(vals) / len(vals)

    q = subset_mean(SubsetLabel.OBJECTIVE_KNOWN, layer)
    y1 = subset_mean(SubsetLabel.OBJECTIVE_UNKNOWN, layer)
    y2 = subset_mean(SubsetLabel.NONOBJECTIVE_UNKNOWN, final_layer)
    return q, y1, y2


# ---------------------------------------------------------------------
# Tree structure
# ---------------------------------------------------------------------

@dataclass
class CactusNode:
    node_id: int
    branch_id: int
    block: Network
    predictor: object = None          # callable activation -> float
    thresholds: Thresholds | None = None
    children: list = field(default_factory=list)
    head: Network | None = None       # leaf classifier
    labels: tuple = ()                # known class ids of the head
    provisional: bool = False
    provisional_label: str | None = None
    seed: int | None = None           # branch init seed, for replay

    @property
    def routable(self) -> bool:
        """Provisional branches have no predictor yet and are reached
        only through growth-time absorption, never by max-App routing."""
        return self.predictor is not None and self.thresholds is not None

    @property
    def is_leaf(self) -> bool:
        return not self.children


class CactusTree:
    def __init__(self, root: CactusNode, decision_depth: int):
        self.root = root
        self.decision_depth = decision_depth
        self.nodes = {}
        self._index(root)
        self.next_node_id = max(self.nodes) + 1
        self.next_branch_id = max(n.branch_id for n in self.nodes.values()) + 1
        # per-node growth bookkeeping: below-threshold event counts and
        # the event at which each provisional branch last absorbed
        self.growth_state = {}

    def _index(self, node):
        if node.node_id in self.nodes:
            raise ConfigError(f"duplicate node id {node.node_id}")
        self.nodes[node.node_id] = node
        for child in node.children:
            self._index(child)

    def trunk_chain(self):
        """Trunk nodes root-to-leaf (branch id 0, single child chain)."""
        chain = [self.root]
        node = self.root
        while True:
            nxt = [c for c in node.children if c.branch_id == 0]
            if not nxt:
                return chain
            node = nxt[0]
            chain.append(node)

    def topology(self) -> dict:
        """Stable description of structure + parameters, for comparison
        and persistence."""
        def describe(node, parent):
            return {
                "node_id": node.node_id,
                "branch_id": node.branch_id,
                "parent": parent,
                "provisional": node.provisional,
                "labels": list(node.labels),
                "provisional_label": node.provisional_label,
                "seed": node.seed,
                "thresholds": node.thresholds.to_dict() if node.thresholds else None,
                "layers": [s.to_dict() for s in node.block.specs],
                "param_digest": _param_digest(node.block, node.head),
                "head_labels": list(node.labels),
                "children": [describe(c, node.node_id)
                             for c in sorted(node.children,
                                             key=lambda c: c.node_id)],
            }
        return describe(self.root, None)


def _param_digest(block: Network, head: Network | None) -> str:
    import hashlib
    h = hashlib.sha256()
    for net in (block, head):
        if net is None:
            continue
        for p in net.params:
            if p is not None:
                h.update(np.ascontiguousarray(p["W"], dtype="<f4").tobytes())
                h.update(np.ascontiguousarray(p["b"], dtype="<f4").tobytes())
    return h.hexdigest()


def build_tree(net: Network, tap_indices, predictors, thresholds,
               labels, decision_depth: int) -> CactusTree:
    """Cut a trained network into trunk blocks at its tap indices.

    ``predictors`` maps tap index -> callable; ``thresholds`` is one
    Thresholds for all depths or a mapping tap index -> Thresholds.
    The residue after the last tap (the classifier head) is attached to
    the deepest trunk node together with its ``labels``.
    """
    taps = sorted(tap_indices)
    if not taps or taps[-1] >= net.layer_count - 1:
        raise ConfigError(f"invalid tap indices {taps}")
    if not 1 <= decision_depth < len(taps):
        raise ConfigError(
            f"decision depth {decision_depth} outside 1..{len(taps) - 1}")

    def block(lo, hi):  # layers [lo, hi] inclusive
        in_shape = net.input_shape if lo == 0 else net.shapes[lo - 1]
        return Network(net.specs[lo:hi + 1], in_shape, net.params[lo:hi + 1])

    def thr_for(tap):
        if isinstance(thresholds, Thresholds):
            return thresholds
        return thresholds[tap]

    nodes = []
    lo = 0
    for depth, tap in enumerate(taps):
        node = CactusNode(node_id=depth, branch_id=0, block=block(lo, tap))
        node.predictor = predictors.get(tap) if predictors else None
        node.thresholds = thr_for(tap) if thresholds is not None else None
        nodes.append(node)
        lo = tap + 1
    for parent, child in zip(nodes, nodes[1:]):
        parent.children.append(child)
    leaf = nodes[-1]
    leaf.head = block(taps[-1] + 1, net.layer_count - 1)
    leaf.labels = tuple(labels)
    return CactusTree(nodes[0], decision_depth)


# ---------------------------------------------------------------------
# Routing
# ---------------------------------------------------------------------

@dataclass
class RouteDecision:
    verdict: Verdict
    label: int | None = None
    path: list = field(default_factory=list)
    apps: list = field(default_factory=list)
    branch_created: int | None = None
    routed_branch: int | None = None
    unrouted: bool = False
    input_index: int | None = None
    provisional_label: str | None = None
    stopped_at: int | None = None      # node where routing found no child

    def to_dict(self):
        return {"verdict": self.verdict.value, "label": self.label,
                "path": list(self.path), "apps": [float(a) for a in self.apps],
                "branch_created": self.branch_created,
                "routed_branch": self.routed_branch,
                "unrouted": self.unrouted, "input_index": self.input_index,
                "provisional_label": self.provisional_label,
                "stopped_at": self.stopped_at}


def route_step(node: CactusNode, activation, predicted_apps):
    """Select among the node's routable children.

    Children whose predicted App strictly exceeds their own tau2
    qualify; the highest App wins, ties to the lowest branch id.
    Returns (child, app) or None when no child qualifies (branch
    needed).
    """
    candidates = [c for c in node.children if c.routable]
    if len(candidates) != len(predicted_apps):
        raise RoutingError(
            f"{len(candidates)} routable candidates but "
            f"{len(predicted_apps)} predicted apps at node {node.node_id}")
    best = None
    for child, app in zip(candidates, predicted_apps):
        if app > child.thresholds.tau2:
            if best is None or app > best[1] or \
                    (app == best[1] and child.branch_id < best[0].branch_id):
                best = (child, app)
    return best


def _classify_leaf(node: CactusNode, activation):
    if node.head is None or not node.labels:
        raise ConfigError(f"leaf node {node.node_id} has no trained head")
    out = forward(node.head, activation)[-1]
    return node.labels[int(out[0].argmax())]


def classify_or_flag(tree: CactusTree, image, mock_app=None) -> RouteDecision:
    """Descend the tree and render the three-way verdict.

    ``mock_app`` substitutes the given value for every predictor call
    on this input (used for regime replays and dry runs).
    """
    x = np.asarray(image, dtype=np.float32)
    if x.ndim == len(tree.root.block.input_shape):
        x = x[None]
    act = forward(tree.root.block, x)[-1]
    node = tree.root
    decision = RouteDecision(Verdict.KNOWN, path=[node.node_id])
    depth = 0
    while not node.is_leaf:
        candidates = [c for c in node.children if c.routable]
        if not candidates:
            raise ConfigError(
                f"node {node.node_id} has children but none routable "
                "(untrained predictors on the path)")
        cand_acts = [forward(c.block, act)[-1] for c in candidates]
        if mock_app is not None:
            apps = [float(mock_app)] * len(candidates)
        else:
            apps = [float(c.predictor(a[0])) for c, a in zip(candidates, cand_acts)]
        best = route_step(node, act, apps)
        if best is None:
            decision.verdict = Verdict.NONOBJECTIVE_UNKNOWN
            decision.stopped_at = node.node_id
            decision.apps.append(max(apps))
            return decision
        child, app = best
        idx = candidates.index(child)
        act = cand_acts[idx]
        node = child
        depth += 1
        decision.path.append(node.node_id)
        decision.apps.append(app)
        if depth == tree.decision_depth:
            verdict = decide(app, node.thresholds)
            if verdict is Verdict.OBJECTIVE_UNKNOWN:
                decision.verdict = verdict
                return decision
            if verdict is Verdict.NONOBJECTIVE_UNKNOWN:
                decision.verdict = verdict
                decision.stopped_at = node.node_id
                return decision
    decision.verdict = Verdict.KNOWN
    decision.label = _classify_leaf(node, act)
    return decision


# ---------------------------------------------------------------------
# Branch creation and growth
# ---------------------------------------------------------------------

def _trunk_template(tree: CactusTree, at_node: CactusNode):
    """Blocks below ``at_node`` on the trunk, plus the trunk head."""
    chain = tree.trunk_chain()
    if at_node not in chain:
        raise RoutingError(f"node {at_node.node_id} is not on the trunk")
    below = chain[chain.index(at_node) + 1:]
    leaf = chain[-1]
    return [n.block for n in below], leaf.head


def create_branch(tree: CactusTree, at_node: CactusNode, template=None,
                  seed: int = 0) -> int:
    """Grow a fresh provisional branch off ``at_node``.

    The new subtree clones the remaining trunk architecture (or the
    given ``(blocks, head)`` template) with freshly initialized
    parameters; the trunk itself is never touched.  The new leaf starts
    with an empty label set and a provisional new-class label.
    """
    blocks, head = template if template is not None else _trunk_template(tree, at_node)
    if not blocks:
        raise RoutingError("cannot branch at the trunk leaf: nothing below it")
    expect = at_node.block.output_shape
    if tuple(blocks[0].input_shape) != tuple(expect):
        raise ShapeMismatchError(
            f"branch template expects input {blocks[0].input_shape}, node "
            f"emits {expect}")
    branch_id = tree.next_branch_id
    tree.next_branch_id += 1
    label = f"new-class-{branch_id}"
    parent = at_node
    for i, block in enumerate(blocks):
        fresh = Network.build(block.specs, block.input_shape,
                              seed=derive_seed(seed, branch_id, i))
        node = CactusNode(node_id=tree.next_node_id, branch_id=branch_id,
                          block=fresh, provisional=True,
                          provisional_label=label, seed=seed)
        tree.next_node_id += 1
        tree.nodes[node.node_id] = node
        parent.children.append(node)
        parent = node
    if head is not None:
        parent.head = Network.build(head.specs, head.input_shape,
                                    seed=derive_seed(seed, branch_id, 0x4EAD))
    return branch_id


@dataclass(frozen=True)
class GrowthConfig:
    max_branches_per_node: int = 4
    consolidation_window: int = 25
    seed: int = 0


@dataclass
class GrowthLog:
    config: GrowthConfig
    decisions: list = field(default_factory=list)

    def verdict_counts(self):
        counts = {}
        for d in self.decisions:
            counts[d.verdict] = counts.get(d.verdict, 0) + 1
        return counts


def grow(tree: CactusTree, input_stream, growth_config: GrowthConfig) -> GrowthLog:
    """Route a stream in order, growing branches on nonobjective inputs.

    A below-threshold input feeds an existing provisional branch if that
    branch absorbed something within the last ``consolidation_window``
    below-threshold events at the node; otherwise a new branch is
    created (up to ``max_branches_per_node``), so a homogeneous burst of
    novel inputs consolidates into a single branch instead of one per
    image.  Every input is logged; the log replays to the same tree.
    """
    log = GrowthLog(growth_config)
    created = 0
    for index, item in enumerate(input_stream):
        image, mock_app = _stream_item(item)
        decision = classify_or_flag(tree, image, mock_app=mock_app)
        decision.input_index = index
        if decision.verdict is Verdict.OBJECTIVE_UNKNOWN:
            decision.provisional_label = f"objective-unknown-{index}"
        elif decision.verdict is Verdict.NONOBJECTIVE_UNKNOWN:
            node = tree.nodes[decision.stopped_at]
            state = tree.growth_state.setdefault(
                node.node_id, {"events": 0, "last_absorb": {}})
            state["events"] += 1
            window = growth_config.consolidation_window
            active = [bid for bid, last in sorted(state["last_absorb"].items())
                      if state["events"] - last <= window]
            branch_children = [c for c in node.children if c.provisional]
            if active:
                bid = active[0]
                state["last_absorb"][bid] = state["events"]
                decision.routed_branch = bid
            elif len(branch_children) < growth_config.max_branches_per_node:
                seed = derive_seed(growth_config.seed, 0x9120, created)
                bid = create_branch(tree, node, seed=seed)
                created += 1
                state["last_absorb"][bid] = state["events"]
                decision.branch_created = bid
                decision.routed_branch = bid
                decision.provisional_label = f"new-class-{bid}"
            else:
                decision.unrouted = True
        log.decisions.append(decision)
    return log


def _stream_item(item):
    if isinstance(item, tuple):
        return item[0], item[1]
    if isinstance(item, dict):
        return item.get("image"), item.get("mock_app")
    return item, None


def replay_log(tree: CactusTree, log: GrowthLog) -> CactusTree:
    """Re-apply the creation events of a log to a copy of the initial
    tree; creation seeds are a pure function of creation order, so the
    replayed topology matches the grown tree exactly."""
    created = 0
    for d in log.decisions:
        if d.branch_created is not None:
            node = tree.nodes[d.stopped_at]
            create_branch(tree, node,
                          seed=derive_seed(log.config.seed, 0x9120, created))
            created += 1
    return tree


# ---------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------

def save_tree(tree: CactusTree, out_dir):
    """JSON topology plus one checkpoint per node block/head."""
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    refs = {}
    for nid, node in sorted(tree.nodes.items()):
        block_ref = f"node_{nid}.ckpt"
        checkpoint_save(node.block, out / block_ref)
        head_ref = None
        if node.head is not None:
            head_ref = f"head_{nid}.ckpt"
            checkpoint_save(node.head, out / head_ref)
        refs[nid] = (block_ref, head_ref)

    def describe(node, parent):
        block_ref, head_ref = refs[node.node_id]
        return {
            "node_id": node.node_id, "branch_id": node.branch_id,
            "parent": parent, "provisional": node.provisional,
            "labels": list(node.labels),
            "provisional_label": node.provisional_label,
            "seed": node.seed,
            "thresholds": node.thresholds.to_dict() if node.thresholds else None,
            "block": block_ref, "head": head_ref,
            "children": [describe(c, node.node_id)
                         for c in sorted(node.children, key=lambda c: c.node_id)],
        }

    doc = {"decision_depth": tree.decision_depth,
           "root": describe(tree.root, None)}
    with open(out / "tree.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_tree(tree_dir, predictors=None) -> CactusTree:
    """Rebuild a tree from ``save_tree`` output.

    ``predictors`` maps node_id -> callable to rewire predictors (they
    are checkpointed separately by the experiment runner).
    """
    from pathlib import Path
    root_dir = Path(tree_dir)
    with open(root_dir / "tree.json", encoding="utf-8") as fh:
        doc = json.load(fh)

    def restore(desc):
        node = CactusNode(
            node_id=desc["node_id"], branch_id=desc["branch_id"],
            block=checkpoint_load(root_dir / desc["block"]),
            thresholds=Thresholds.from_dict(desc["thresholds"])
            if desc["thresholds"] else None,
            labels=tuple(desc["labels"]),
            provisional=desc["provisional"],
            provisional_label=desc["provisional_label"],
            seed=desc["seed"])
        if desc["head"]:
            node.head = checkpoint_load(root_dir / desc["head"])
        if predictors and desc["node_id"] in predictors:
            node.predictor = predictors[desc["node_id"]]
        node.children = [restore(c) for c in desc["children"]]
        return node

    return CactusTree(restore(doc["root"]), doc["decision_depth"])


# ---------------------------------------------------------------------
# Growth-log persistence (JSON lines, one decision per line)
# ---------------------------------------------------------------------

def save_growth_log(log: GrowthLog, path):
    with open(path, "w", encoding="utf-8") as fh:
        header = {"max_branches_per_node": log.config.max_branches_per_node,
                  "consolidation_window": log.config.consolidation_window,
                  "seed": log.config.seed}
        fh.write(json.dumps({"config": header}, sort_keys=True) + "\n")
        for d in log.decisions:
            fh.write(json.dumps(d.to_dict(), sort_keys=True) + "\n")


def load_growth_log(path) -> GrowthLog:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    cfg = lines[0]["config"]
    log = GrowthLog(GrowthConfig(cfg["max_branches_per_node"],
                                 cfg["consolidation_window"], cfg["seed"]))
    for doc in lines[1:]:
        log.decisions.append(RouteDecision(
            Verdict(doc["verdict"]), label=doc["label"], path=doc["path"],
            apps=doc["apps"], branch_created=doc["branch_created"],
            routed_branch=doc["routed_branch"], unrouted=doc["unrouted"],
            input_index=doc["input_index"],
            provisional_label=doc["provisional_label"],
            stopped_at=doc["stopped_at"]))
    return log
