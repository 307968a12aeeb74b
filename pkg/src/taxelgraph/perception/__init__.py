"""Perception models: the dynamic hierarchical graph network and its baselines."""

from .baselines import (CNNNet, CNNParams, GCNNet, MLPNet, cnn_grid_forward, default_grid_shape,
                        gcn_static_forward, init_cnn, init_mlp_baseline, mlp_baseline_forward, pack_grid)
from .estimators import (CNNRegressor, GCNRegressor, MLPRegressor, PerceptionRegressor, TacGNNRegressor,
                         load_regressor, make_regressor)
from .tacgnn import (TacGNNNet, TacGNNParams, encode_nodes, init_tacgnn, message_layer, tacgnn_backward,
                     tacgnn_forward, tacgnn_gradient_check)
from .training import batch_rmse, rmse_loss, train_perception, train_test_split_indices

__all__ = [
    "CNNNet", "CNNParams", "CNNRegressor", "GCNNet", "GCNRegressor", "MLPNet", "MLPRegressor",
    "PerceptionRegressor", "TacGNNNet", "TacGNNParams", "TacGNNRegressor", "batch_rmse", "cnn_grid_forward",
    "default_grid_shape", "encode_nodes", "gcn_static_forward", "init_cnn", "init_mlp_baseline", "init_tacgnn",
    "load_regressor", "make_regressor", "message_layer", "mlp_baseline_forward", "pack_grid", "rmse_loss",
    "tacgnn_backward", "tacgnn_forward", "tacgnn_gradient_check", "train_perception", "train_test_split_indices",
]
