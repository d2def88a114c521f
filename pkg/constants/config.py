APP_TITLE = "PMAM Lab"
APP_DESCRIPTION = "Desk-scale laboratory for prototype-based masked audio model pretraining of sound event detectors."

# File formats
CLIP_MAGIC = b"PMAMCLIP"
CLIP_FORMAT_VERSION = 1
PSEUDO_LABEL_MAGIC = b"PMAMPSL"
PSEUDO_LABEL_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 2

# Output projections of attention and feedforward sublayers start this much
# smaller than the other weights, so a fresh residual stack stays close to
# its patch embedding
RESIDUAL_INIT_SCALE = 0.1

MANIFEST_NAME = "manifest.yaml"
CLIP_DIR = "clips"
EFFECTIVE_CONFIG_NAME = "effective_config.yaml"
CHECKPOINT_NAME = "checkpoint.safetensors"
PROTOTYPE_MODEL_NAME = "prototypes.bin"
PSEUDO_LABEL_DIR = "pseudo_labels"

# Environment variables (read through utils.env_loader)
ENV_LOG_LEVEL = "PMAM_LOG_LEVEL"
ENV_OUT_DIR = "PMAM_OUT_DIR"
DEFAULT_OUT_DIR = "runs/default"

# Stage-size presets. "desk" is the default; "paper" is the long schedule
# (30 pretrain epochs per iteration, 45 fine-tune epochs with 15 frozen,
# batch 18, 30 prototypes, 7 conv layers, split learning rates).
PRESETS = {
    "desk": {},
    "paper": {
        "encoder": {"conv_channels": [32, 32, 32, 32, 32, 32, 32]},
        "proto": {"n_prototypes": 30},
        "pretrain": {"epochs": 30, "batch_size": 18, "lr": 2e-4, "lr_transformer": 1e-5},
        "finetune": {"epochs": 45, "freeze_epochs": 15, "batch_size": 18, "lr": 2e-4, "lr_transformer": 1e-5},
    },
}
