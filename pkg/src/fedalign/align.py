"""OT-based preprocessing over a simulated network of agents.

Each agent summarises its images as a red/green/blue triplet of local
barycenters. The server only ever receives those triplets, averages them
into a global triplet, and broadcasts it back. Every agent then projects
each of its images onto the global triplet.
"""

from __future__ import annotations

import dataclasses
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import seeding
from .barycenter import BarycenterConfig, bregman_barycenter
from .channels import (
    CHANNEL_NAMES,
    ChannelTriplet,
    MeasureMode,
    image_to_channel_measures,
    on_grid,
    pooled_channel_measures,
    project_image,
)
from .errors import ConvergenceError, ValidationError
from .ot import SinkhornConfig, exact_1d_wasserstein

logger = logging.getLogger(__name__)

# subsample counter used for held-out images, which belong to no agent
HELD_OUT_AGENT = 1_000_000


@dataclass(frozen=True, eq=False)
class LabeledImages:
    """Images ``(M, H, W, 3)`` uint8 with integer labels ``(M,)``.

    ``indices`` records each image's position in the dataset it was drawn
    from.
    """

    images: np.ndarray
    labels: np.ndarray
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[-1] != 3:
            if not (images.ndim == 1 and len(images) == 0):
                raise ValidationError(f"images must have shape (M, H, W, 3), got {images.shape}")
        if images.dtype != np.uint8:
            raise ValidationError("images must be uint8")
        if len(images) != len(labels):
            raise ValidationError(f"{len(images)} images but {len(labels)} labels")
        indices = (
            np.arange(len(labels)) if self.indices is None else np.asarray(self.indices, dtype=np.int64)
        )
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "indices", indices)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledImages":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledImages(self.images[idx], self.labels[idx], self.indices[idx])

    def with_images(self, images) -> "LabeledImages":
        return LabeledImages(np.asarray(images, dtype=np.uint8), self.labels, self.indices)


AgentDataset = LabeledImages


@dataclass
class AgentState:
    agent_id: int
    dataset: AgentDataset
    local_triplet: Optional[ChannelTriplet] = None
    aligned_dataset: Optional[AgentDataset] = None

    @property
    def aligned(self) -> bool:
        return self.aligned_dataset is not None

    def images(self, use_aligned: bool = False) -> np.ndarray:
        if use_aligned:
            if self.aligned_dataset is None:
                raise ValidationError(f"agent {self.agent_id} has no aligned dataset")
            return self.aligned_dataset.images
        return self.dataset.images


@dataclass
class ServerState:
    """Server side of the network; it accepts channel triplets only."""

    expected_agents: Sequence[int] = ()
    collected_triplets: Dict[int, ChannelTriplet] = field(default_factory=dict)
    sample_counts: Dict[int, int] = field(default_factory=dict)
    global_triplet: Optional[ChannelTriplet] = None

    def receive(self, agent_id: int, triplet: ChannelTriplet, n_samples: Optional[int] = None):
        if not isinstance(triplet, ChannelTriplet):
            raise ValidationError(
                f"server accepts ChannelTriplet only, got {type(triplet).__name__}"
            )
        self.collected_triplets[int(agent_id)] = triplet
        if n_samples is not None:
            self.sample_counts[int(agent_id)] = int(n_samples)

    def missing(self) -> List[int]:
        return [a for a in self.expected_agents if a not in self.collected_triplets]


@dataclass(frozen=True)
class AlignConfig:
    mode: MeasureMode = MeasureMode()
    local: BarycenterConfig = BarycenterConfig()
    global_: BarycenterConfig = BarycenterConfig()
    sinkhorn: SinkhornConfig = SinkhornConfig()
    seed: int = 0
    # "uniform" or "size" (weights proportional to shard sizes)
    global_weighting: str = "uniform"
    workers: int = 1

    def __post_init__(self):
        if self.global_weighting not in ("uniform", "size"):
            raise ValidationError(f"unknown global weighting {self.global_weighting!r}")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")


@dataclass
class AlignmentReport:
    """Pairwise channel discrepancies (exact W1) before and after alignment."""

    pre_discrepancy: np.ndarray
    post_discrepancy: np.ndarray
    timings: Dict[str, float] = field(default_factory=dict)
    global_triplet: Optional[ChannelTriplet] = None

    CSV_HEADER = ("agent_i", "agent_j", "channel", "pre_w1", "post_w1")

    @property
    def n_agents(self) -> int:
        return self.pre_discrepancy.shape[0]

    def mean_pre(self) -> float:
        return mean_offdiagonal(self.pre_discrepancy)

    def mean_post(self) -> float:
        return mean_offdiagonal(self.post_discrepancy)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.CSV_HEADER) + "\n")
        n = self.n_agents
        for i in range(n):
            for j in range(n):
                for c, name in enumerate(CHANNEL_NAMES):
                    buf.write(
                        f"{i},{j},{name},{float(self.pre_discrepancy[i, j, c])!r},"
                        f"{float(self.post_discrepancy[i, j, c])!r}\n"
                    )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AlignmentReport":
        lines = text.strip().splitlines()
        if not lines or tuple(lines[0].split(",")) != cls.CSV_HEADER:
            raise ValidationError(f"report CSV must start with header {','.join(cls.CSV_HEADER)}")
        rows = [line.split(",") for line in lines[1:]]
        n = 1 + max((max(int(r[0]), int(r[1])) for r in rows), default=-1)
        pre = np.zeros((n, n, 3))
        post = np.zeros((n, n, 3))
        for r in rows:
            i, j, c = int(r[0]), int(r[1]), CHANNEL_NAMES.index(r[2])
            pre[i, j, c] = float(r[3])
            post[i, j, c] = float(r[4])
        return cls(pre, post)

    def summary(self, timings: bool = True) -> str:
        lines = [f"agents: {self.n_agents}"]
        for c, name in enumerate(CHANNEL_NAMES):
            lines.append(
                f"{name}: mean pre W1 {mean_offdiagonal(self.pre_discrepancy[..., c:c + 1]):.6f}"
                f"  post W1 {mean_offdiagonal(self.post_discrepancy[..., c:c + 1]):.6f}"
            )
        pre, post = self.mean_pre(), self.mean_post()
        ratio = post / pre if pre > 0 else float("nan")
        lines.append(f"overall: mean pre W1 {pre:.6f}  post W1 {post:.6f}  ratio {ratio:.4f}")
        for phase, seconds in (self.timings.items() if timings else ()):
            lines.append(f"time {phase}: {seconds:.3f}s")
        return "\n".join(lines) + "\n"


def mean_offdiagonal(mat: np.ndarray) -> float:
    n = mat.shape[0]
    if n < 2:
        return 0.0
    mask = ~np.eye(n, dtype=bool)
    return float(mat[mask].mean())


def partition_dataset(dataset: LabeledImages, n_agents: int, seed: int = 0) -> List[AgentDataset]:
    """Shuffle and split into ``n_agents`` disjoint shards of near-equal size.

    Sampling is uniform without replacement; shard sizes differ by at most
    one and every shard keeps the images in shuffled order.
    """
    if n_agents < 1:
        raise ValidationError("n_agents must be >= 1")
    if n_agents > len(dataset):
        raise ValidationError(f"cannot split {len(dataset)} samples over {n_agents} agents")
    perm = seeding.rng(seed, seeding.PARTITION).permutation(len(dataset))
    return [dataset.subset(chunk) for chunk in np.array_split(perm, n_agents)]


def make_agents(shards: Sequence[AgentDataset]) -> List[AgentState]:
    return [AgentState(agent_id=a, dataset=shard) for a, shard in enumerate(shards)]


def image_seed(seed: int, agent_id: int, image_index: int):
    return (seed, agent_id, image_index)


def compute_local_triplet(
    agent: AgentState,
    mode: Optional[MeasureMode] = None,
    cfg: Optional[BarycenterConfig] = None,
    seed: int = 0,
) -> ChannelTriplet:
    """Channel-wise barycenter of the agent's per-image channel measures."""
    mode = mode or MeasureMode()
    cfg = cfg or BarycenterConfig()
    if len(agent.dataset) == 0:
        raise ValidationError(f"agent {agent.agent_id} has no images")
    grid = mode.grid()
    per_image = [
        image_to_channel_measures(img, mode, image_seed(seed, agent.agent_id, i))
        for i, img in enumerate(agent.dataset.images)
    ]
    channels = []
    for c, name in enumerate(CHANNEL_NAMES):
        result = bregman_barycenter([on_grid(t[c], grid) for t in per_image], cfg)
        if not result.converged:
            raise ConvergenceError(
                "local barycenter did not converge",
                violation=result.last_change,
                context={"phase": "local", "agent": agent.agent_id, "channel": name},
            )
        channels.append(result.measure)
    return ChannelTriplet(*channels)


def aggregate_global_triplet(server: ServerState, cfg: Optional[BarycenterConfig] = None) -> ChannelTriplet:
    """Channel-wise barycenter of all collected local triplets.

    Triplets are taken in ascending agent id; the result is stored on the
    server.
    """
    cfg = cfg or BarycenterConfig()
    missing = server.missing()
    if missing:
        raise ValidationError(f"no triplet received from agent {missing[0]} (missing: {missing})")
    if not server.collected_triplets:
        raise ValidationError("server holds no triplets")
    ids = sorted(server.collected_triplets)
    channels = []
    for c, name in enumerate(CHANNEL_NAMES):
        result = bregman_barycenter([server.collected_triplets[a][c] for a in ids], cfg)
        if not result.converged:
            raise ConvergenceError(
                "global barycenter did not converge",
                violation=result.last_change,
                context={"phase": "global", "channel": name},
            )
        channels.append(result.measure)
    server.global_triplet = ChannelTriplet(*channels)
    return server.global_triplet


def project_images(images, target, mode, cfg, seed, agent_id) -> np.ndarray:
    out = np.empty_like(images)
    for i, img in enumerate(images):
        try:
            out[i] = project_image(img, target, mode, cfg, image_seed(seed, agent_id, i))
        except ConvergenceError as err:
            raise err.with_context(phase="projection", agent=agent_id, image=i) from None
    return out


def project_held_out(images, target: ChannelTriplet, config: AlignConfig) -> np.ndarray:
    """Project a held-out set (e.g. a test split) onto the global triplet."""
    return project_images(np.asarray(images), target, config.mode, config.sinkhorn, config.seed, HELD_OUT_AGENT)


def discrepancy_matrix(agents: Sequence[AgentState], use_aligned: bool = False) -> np.ndarray:
    """``(N, N, 3)`` exact W1 between agents' pooled 256-bin channel histograms."""
    hists = [
        pooled_channel_measures(ag.images(use_aligned), MeasureMode.histogram()) for ag in agents
    ]
    n = len(agents)
    out = np.zeros((n, n, 3))
    for i in range(n):
        for j in range(i + 1, n):
            for c in range(3):
                out[i, j, c] = out[j, i, c] = exact_1d_wasserstein(hists[i][c], hists[j][c], p=1)
    return out


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def align_network(
    agents: Sequence[AgentState],
    server: Optional[ServerState] = None,
    config: Optional[AlignConfig] = None,
):
    """Run the full preprocessing pipeline.

    Local barycenters, collection at the server, global barycenter,
    broadcast, per-image projection. Returns new agent states holding both
    the original and the aligned dataset, and an :class:`AlignmentReport`
    (which also carries the global triplet).
    """
    config = config or AlignConfig()
    agents = sorted(agents, key=lambda ag: ag.agent_id)
    ids = [ag.agent_id for ag in agents]
    if len(set(ids)) != len(ids):
        raise ValidationError("agent ids must be unique")
    if server is None:
        server = ServerState(expected_agents=ids)
    timings = {}

    t0 = time.perf_counter()
    pre = discrepancy_matrix(agents, use_aligned=False)
    timings["pre_metrics"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    triplets = _map(
        lambda ag: compute_local_triplet(ag, config.mode, config.local, config.seed),
        agents,
        config.workers,
    )
    agents = [dataclasses.replace(ag, local_triplet=t) for ag, t in zip(agents, triplets)]
    timings["local_barycenters"] = time.perf_counter() - t0

    for ag in agents:
        server.receive(ag.agent_id, ag.local_triplet, n_samples=len(ag.dataset))

    t0 = time.perf_counter()
    global_cfg = config.global_
    if config.global_weighting == "size":
        counts = np.array([server.sample_counts[a] for a in sorted(server.collected_triplets)], float)
        global_cfg = dataclasses.replace(global_cfg, weights=tuple(counts / counts.sum()))
    target = aggregate_global_triplet(server, global_cfg)
    timings["global_barycenter"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    aligned_images = _map(
        lambda ag: project_images(
            ag.dataset.images, target, config.mode, config.sinkhorn, config.seed, ag.agent_id
        ),
        agents,
        config.workers,
    )
    agents = [
        dataclasses.replace(ag, aligned_dataset=ag.dataset.with_images(imgs))
        for ag, imgs in zip(agents, aligned_images)
    ]
    timings["projection"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    post = discrepancy_matrix(agents, use_aligned=True)
    timings["post_metrics"] = time.perf_counter() - t0

    report = AlignmentReport(pre, post, timings, target)
    logger.info("alignment done: mean W1 %.5f -> %.5f", report.mean_pre(), report.mean_post())
    return agents, report
