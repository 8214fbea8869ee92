"""Single-token textual inversion at desk scale.

Speaks the filesystem worker contract: a job directory with `style.json`
and `refs/*.png` in, `out/embedding.bin` plus `out/meta.json` out, exit
code zero on success and an `out/error.log` otherwise.
"""

from .inversion import BASE_MODELS, InversionConfig, run_job, train

__version__ = "0.1.0"
__all__ = ["BASE_MODELS", "InversionConfig", "run_job", "train"]
