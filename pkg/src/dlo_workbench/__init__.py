"""Shape control of a deformable linear object with parallel DDPG."""

__version__ = "1.0.0"
