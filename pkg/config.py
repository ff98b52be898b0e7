# Configuration file for the master-equation solver and certification suite
# You can modify these values to change solver and verifier defaults.
# Every library function takes these as keyword defaults; a run config
# (see run_config.py) overrides them per run.

# Seed used when a run config does not name one
DEFAULT_SEED = 20240601

# Tolerances
TOL_ALGEBRAIC = 1e-9  # algebraic identities (zero-mass solve, exact checks)
TOL_SAMPLED = 1e-6  # sampled inequalities (hypothesis checks)
SOLVER_TOL = 1e-8  # sup-norm residual for false-transient stationary solves

# Finite-difference Jacobian step (relative, central differences)
JACOBIAN_STEP = 1e-5

# Grid settings
MAX_GRID_NODES = 2_000_000  # refuse grids with more nodes than this
CFL_NUMBER = 0.9  # explicit transport bound dt*(|v|_1/h + 2*lambda) <= CFL_NUMBER
PARABOLIC_CFL = 0.45  # viscous bound dt*eps*max(sigma)/h^2 <= PARABOLIC_CFL
INTERPOLATION_TOL = 1e-9  # snapping tolerance for lattice points / hull membership

# False-transient iteration
STAGNATION_WINDOW = 2000  # residual must drop 10x within this many sweeps
MAX_PSEUDO_STEPS = 400_000

# Characteristics / shooting
SHOOTING_MAX_ITER = 60
SHOOTING_MAX_HALVINGS = 30
SHOOTING_FD_STEP = 1e-6
ORTHANT_CLIP_TOL = 1e-8  # negative coordinates above -ORTHANT_CLIP_TOL are clipped to 0

# Hypothesis sampling
DEFAULT_N_SAMPLES = 2000
PRECHECK_SAMPLES = 256  # samples used by solvers before refusing a spec
VALUE_SCALE = 10.0  # value vectors p are drawn from [-VALUE_SCALE, VALUE_SCALE]^d

# Stopping / penalization
EPS_FIRST = 0.5
EPS_RATIO = 0.5
EPS_LEVELS = 10
BETA_PRIME_AT_ZERO = 0.0
CONTINUATION_SPREAD = 3.0  # max/min of max_positive_part/eps before a warning

# Impulse control
ALPHA_RELAXATION = 0.5
CHATTER_WINDOW = 50

# Verification
STEGALL_MAX_DRAWS = 64
STEGALL_HALVING_EVERY = 16
STRICTNESS_THRESHOLD = 1e-12
STEGALL_DELTA = 1e-3  # perturbation radius relative to the value spread
SINGULAR_COND = 1e12  # phi Jacobians above this condition number are treated as singular
PAIR_COUNT_CAP = 10**7
LIPSCHITZ_DIRECTIONS = 100

# Maximum number of parallel workers for sample batches
MAX_WORKERS = 4

# Report settings
LOG_FILE = "run.log"
RESOLVED_CONFIG_FILE = "resolved_config.json"
SUMMARY_WORKBOOK = "summary.xlsx"
