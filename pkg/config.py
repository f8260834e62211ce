import os
from dotenv import load_dotenv

load_dotenv()


def _env_list(name: str, default: str):
    return [float(v) for v in os.getenv(name, default).split(',') if v.strip()]


class Config:
    # Reproducibility
    SEED = int(os.getenv('METASEG_SEED', 0))
    LOG_LEVEL = os.getenv('METASEG_LOG_LEVEL', 'INFO')
    WORKERS = int(os.getenv('METASEG_WORKERS', 1))

    # Meta-learning step sizes
    INNER_LR = float(os.getenv('METASEG_INNER_LR', 0.01))      # alpha, inner step
    OUTER_LR = float(os.getenv('METASEG_OUTER_LR', 0.01))      # beta, outer step
    FINETUNE_LR = float(os.getenv('METASEG_FINETUNE_LR', 0.01))

    # SGD with Nesterov momentum
    MOMENTUM = float(os.getenv('METASEG_MOMENTUM', 0.99))
    WEIGHT_DECAY = float(os.getenv('METASEG_WEIGHT_DECAY', 3e-5))
    POLY_POWER = 0.9

    # Class-aware regularization
    LAMBDA1 = float(os.getenv('METASEG_LAMBDA1', 1.5))          # triplet margin
    LAMBDA2 = float(os.getenv('METASEG_LAMBDA2', 0.1))          # regularization weight
    BANK_CAPACITY = int(os.getenv('METASEG_BANK_CAPACITY', 100))

    # Numerics
    FD_EPSILON = float(os.getenv('METASEG_FD_EPSILON', 1e-3))
    DICE_SMOOTH = 1e-5
    COSINE_NORM_FLOOR = 1e-12
    DIVERGENCE_THRESHOLD = float(os.getenv('METASEG_DIVERGENCE_THRESHOLD', 1e12))
    SECOND_ORDER_PARAM_CAP = int(os.getenv('METASEG_SECOND_ORDER_PARAM_CAP', 5000))

    # Network
    NETWORK_DEPTH = int(os.getenv('METASEG_NETWORK_DEPTH', 3))
    CHANNEL_MULTIPLIER = int(os.getenv('METASEG_CHANNEL_MULTIPLIER', 8))
    NUM_CLASSES = 4
    NORM_EPS = 1e-5

    # Deep supervision weights, coarsest to finest
    DEEP_SUPERVISION_WEIGHTS = _env_list('METASEG_DEEP_SUPERVISION_WEIGHTS', '0.25,0.5,1.0')

    # Data
    BATCH_SIZE = int(os.getenv('METASEG_BATCH_SIZE', 2))
    EXTENTS = (int(os.getenv('METASEG_EXTENT', 32)),) * 2
    SAMPLES_PER_DOMAIN = int(os.getenv('METASEG_SAMPLES_PER_DOMAIN', 40))
    HELD_OUT_TEST = int(os.getenv('METASEG_HELD_OUT_TEST', 10))
    BIAS_AMPLITUDE = 0.05

    # Meta-test
    FINETUNE_STEPS = int(os.getenv('METASEG_FINETUNE_STEPS', 20))
    FINETUNE_MASK = os.getenv('METASEG_FINETUNE_MASK', 'last-3')

    # Convergence lab
    RATE_HORIZONS = [100, 1000, 10000, 100000]
    RATE_REPEATS = int(os.getenv('METASEG_RATE_REPEATS', 20))
    RATE_SLOPE_THRESHOLD = -0.45
