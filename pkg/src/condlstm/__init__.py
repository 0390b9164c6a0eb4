"""Condition-initialized LSTM forecasting of crowdfunding outcomes.

Daily forecasts of a campaign's final donation total from static case
attributes, post text and the daily activity series, plus the baseline
fusion models, timeliness metrics and temporal clustering used to study them.
"""

__version__ = "0.1.0"
