"""Verbal technical analysis workbench: annotated price windows, a group-relative policy
optimization trainer for forecast reasoning, a cross-modal forecasting backbone, guided
forecasting and a Markowitz backtest."""

__version__ = "0.1.0"
