"""drivlab: a desk-scale laboratory for scene-drivability experiments.

Generate synthetic drives with a human oracle, train a recurrent driving
model, label its failures against the oracle, train a Safe/Hazardous
predictor on a disjoint split, and quantify the safety gain of hazard-ranked
human takeover against interval and dropout-uncertainty baselines.
"""

__version__ = "0.1.0"
