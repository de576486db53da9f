"""
Versioned constants for the synthetic corruption benchmark.

Bump CONSTANTS_VERSION whenever a table below changes; exported datasets record it.
"""

CONSTANTS_VERSION = "2"

SEVERITY_LEVELS = (1, 2, 3, 4, 5)

# Severity tables, indexed by severity - 1. Each is ordered by distortion strength.
GAUSSIAN_NOISE_SIGMA = (0.04, 0.08, 0.12, 0.18, 0.26)
BLUR_SIGMA = (0.6, 0.9, 1.2, 1.6, 2.0)
CONTRAST_FACTOR = (0.75, 0.6, 0.45, 0.3, 0.2)
BRIGHTNESS_SHIFT = (0.05, 0.1, 0.15, 0.2, 0.3)
# Pixelate blends each image toward one fixed coarse grid, so the change per image
# scales with the weight alone.
PIXELATE_BLOCK = 8
PIXELATE_WEIGHT = (0.3, 0.5, 0.7, 0.85, 1.0)

# Gradual benchmark: severity cycle run through for every corruption kind.
GRADUAL_SEVERITY_CYCLE = (1, 2, 3, 4, 5, 4, 3, 2, 1)
CONTINUAL_SEVERITY = 5

# Numerical floors
STD_FLOOR = 1e-5
LOG_CLAMP = 1e-12

# Procedural pattern parameters
PATTERN_AMPLITUDE = 0.35
PATTERN_BACKGROUND = 0.5
PATTERN_PIXEL_NOISE = 0.02
PATTERN_BASE_FREQUENCY = 4.0
PATTERN_FREQUENCY_STEP = 1.5
PATTERN_ANGLE_JITTER = 0.3  # fraction of the angular gap between neighbouring classes
PATTERN_FREQUENCY_JITTER = 0.08
