"""Neural RGB-D surface reconstruction on a dense feature grid with
shallow decoders, classical TSDF fusion prior, per-frame intrinsic
refinement, and mesh evaluation metrics."""

__version__ = "0.1.0"
