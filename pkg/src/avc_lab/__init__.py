"""Desk-scale autonomous voltage control: AC power flow environment and DQN agent."""

__version__ = "0.1.0"
