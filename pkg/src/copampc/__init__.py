"""Four-party replicated-sharing MPC on a modeled SmartNIC lookaside accelerator."""

__version__ = "0.1.0"
