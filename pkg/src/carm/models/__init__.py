"""Native small-scale classifiers: CNN, LSTM, transformer encoder and random forest."""
from .artifact import load_any, load_model, save_model
from .config import (FEATURE_NAMES, GENE_DOMAINS, ConfigError, Family, ModelConfig, best_cnn,
                     best_forest, best_lstm, best_transformer)
from .forest import RandomForest, extract_features
from .networks import Network, build_network, network_param_count
from .optim import Optimizer, OptimizerSpec, optimizer_step
from .training import (LABEL_ORDER, Ensemble, TrainedModel, TrainingError, backward,
                       ensemble_predict, evaluate, forward, param_count, predict_labels, train)
