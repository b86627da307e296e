"""Landmark stream ablation: graph network versus convolution on the same attribute."""
from __future__ import annotations

from .child import TrainConfig
from .data import EncodedDataset, prepare
from .ppo import PPOConfig
from .search import SearchBudget, SearchContext, new_controller, search_loop
from .space import SearchSpace, cnn_space, gnn_space


def landmark_spaces(widths=(8,)) -> dict[str, SearchSpace]:
    return {
        "gnn": gnn_space("landmarks_gnn", "landmarks", ("mean", "max"), widths, ("mean", "max"), depth=1),
        "cnn": cnn_space("landmarks_cnn", "landmarks", ("conv_k3", "maxpool_k3"), widths, depth=2, width_slots=1),
    }


def landmark_ablation(enc: EncodedDataset, seeds, budget: SearchBudget, train: TrainConfig, ppo: PPOConfig,
                      hidden: int = 32, split_seed: int = 0, spaces: dict[str, SearchSpace] | None = None) -> list[dict]:
    """Search each stream kind standalone on landmarks; one row per (seed, kind) with the best entry."""
    spaces = spaces or landmark_spaces()
    data = prepare(enc, list(spaces.values()), split_seed)
    rows = []
    for seed in seeds:
        for kind, space in spaces.items():
            ctx = SearchContext(data, [space], None, train, mode="standalone")
            state = search_loop(ctx, new_controller([space], None, ppo, hidden, seed), budget, seed,
                                f"ablation/{kind}")
            best = state.leaderboard[0]
            rows.append({"seed": seed, "kind": kind, "key": best.key, "val_error": best.mean_error,
                         "count": best.count})
    return rows
