"""
SuperFBSDE
Picard/pasting solver for coupled Markovian FBSDEs with superquadratic generators.
"""

__version__ = "0.3.0"
