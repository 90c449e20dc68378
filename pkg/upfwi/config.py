import numpy as np

show_warnings = True
show_progress = True
# Number of joblib workers used for per-sample simulations and corpus generation
n_jobs = 1
# When set, every autograd op checks its output for NaN/Inf
nan_check = False


class Config(object):

    # Stability
    cfl_limit = 0.6

    # Absorbing layers
    absorb_layers = 50
    reflection_coeff = 1e-7

    # Geology (m/s)
    velocity_min = 3000.0
    velocity_max = 6000.0

    # Fields
    field_dtype = np.float32
    # Taped runs and the reverse sweep, whatever precision the caller asks for
    tape_dtype = np.float64

    # FWIBIN container
    fwibin_magic = b"FWIB"
    fwibin_schema_version = 1
    manifest_schema_version = 1
    checkpoint_schema_version = 1

    # Optimizer and schedule
    adamw_betas = (0.9, 0.999)
    adamw_eps = 1e-8
    weight_decay = 1e-4
    initial_lr = 3.2e-4
    min_lr = 3.2e-6
    plateau_patience = 5
    plateau_threshold = 1e-3
    lr_factor = 0.1


