"""Information bottleneck attribution for image models."""
