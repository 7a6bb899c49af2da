"""Test suite for pinn-gravity."""
