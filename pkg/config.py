# GLAP desk-scale training configuration
import hashlib
import json
import os

# Loss Parameters
TAU_INIT = 0.07
BETA_INIT = -10.0
LOGIT_FORM = 'SIGLIP_CONSISTENT'   # 'SIGLIP_CONSISTENT' or 'PAPER_LITERAL'
LOSS = 'sigmoid'                   # 'sigmoid' or 'infonce'
LOSS_PARAM_LR_SCALE = 1.0

# Schedule
PEAK_LR = 1e-4
FLOOR_LR = 1e-5
WARMUP_EPOCHS = 2
EPOCHS = 20
STEPS_PER_EPOCH = 10000
LR_SCHEDULE = 'cosine'             # 'cosine' or 'constant'

# Optimizer
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
GRAD_CLIP = 0.0                    # global-norm clip, 0 to disable

# Batching
BATCH_SIZE = 64
SAMPLER_STRATEGY = 'PER_EXAMPLE_UNIFORM'   # or 'PER_BATCH_STRATIFIED'
SEED = 0

# Towers
EMBED_DIM = 256
MLP_HIDDEN_MULT = 2
AUDIO_ENCODER = 'MEANPOOL_LINEAR'
TEXT_ENCODER = 'BYTE_TRIGRAM_HASH'
AUDIO_ENCODER_DIM = 256
TEXT_ENCODER_DIM = 256
TEXT_BUCKETS = 4096
ENCODERS_TRAINABLE = True

# Numerics
NORM_EPS = 1e-12
UNIT_NORM_TOL = 1e-6
COSINE_SLACK = 1e-5
GRADCHECK_STEP = 1e-3
GRADCHECK_TOL = 1e-4

# Evaluation
RECALL_THRESHOLDS = (1, 5, 10)
MAP_DEPTH = 10
SOURCE_ID_SEP = '#'
SAMPLE_AUDIT_TOL = 0.03

# Zero-shot prompts by domain
PROMPT_TEMPLATES = {
    'speech': '{label}',
    'music': 'The music in the style of {label}.',
    'sound': 'The sound of {label} can be heard.',
}

# Storage
RUNS_FOLDER = "runs"
METRICS_FILE = "metrics.jsonl"
RUN_CONFIG_FILE = "run.json"
LOG_FILE = "glap.log"
LOG_EVERY = 100

# Checkpoints
CHECKPOINT_VERSION = (1, 0)
TENSOR_FORMAT_VERSION = 1

# Exit codes
EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERIC_ABORT = 3

THREADS_ENV = 'GLAP_THREADS'
_THREAD_VARS = ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS')


def apply_thread_cap():
    """Cap BLAS threads from GLAP_THREADS; must run before numpy is imported."""
    threads = os.environ.get(THREADS_ENV)
    if not threads:
        return None
    for var in _THREAD_VARS:
        os.environ[var] = threads
    return int(threads)


def config_hash(cfg_dict):
    """Stable sha256 over the sorted-key JSON of a config mapping."""
    payload = json.dumps(cfg_dict, sort_keys=True, default=str).encode('utf-8')
    return hashlib.sha256(payload).hexdigest()
