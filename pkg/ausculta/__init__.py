# Body-sound self-supervised pretraining and benchmarking toolkit
__version__ = "0.1.0"
