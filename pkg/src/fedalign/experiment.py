"""End-to-end runs: optional alignment followed by federated training."""

from __future__ import annotations

from typing import Optional, Sequence

from .align import AgentState, AlignConfig, LabeledImages, align_network, project_held_out
from .learner import ModelParams, TrainConfig, run_federated_training


def federated_experiment(
    agents: Sequence[AgentState],
    test: LabeledImages,
    train_cfg: TrainConfig,
    align_cfg: Optional[AlignConfig] = None,
    aligned: bool = True,
    init: Optional[ModelParams] = None,
):
    """Train FedAvg on raw or aligned agent data.

    With ``aligned`` the network is aligned first and the test split is
    projected onto the same global triplet, so train and test live in one
    colour space. Returns ``(history, params, report)``; ``report`` is
    ``None`` for raw runs.
    """
    report = None
    if aligned:
        align_cfg = align_cfg or AlignConfig()
        agents, report = align_network(agents, config=align_cfg)
        test = test.with_images(project_held_out(test.images, report.global_triplet, align_cfg))
    history, params = run_federated_training(agents, train_cfg, aligned, test, init=init)
    return history, params, report
