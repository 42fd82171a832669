"""Iterative task-specific learning of inverse-dynamics error models from
indirect (realized-acceleration) and direct (feedback-derived) data."""

__version__ = "0.1.0"
