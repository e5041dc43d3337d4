"""Semi-supervised domain adaptation for segmentation with two teachers.

A student network learns from a few labeled target images, from an
exponential-moving-average teacher on unlabeled target images, and from a
teacher trained on appearance-aligned labeled source images.
"""

from .errors import (ConfigurationError, DimensionError, DualTeacherError, InputError,
                     StateError, TrainingDivergenceError)
from .phantomgen import PhantomSpec, generate_dataset, load_dataset, make_folds, save_dataset
from .trainer import METHODS, TrainConfig, train

__version__ = "0.1.0"
