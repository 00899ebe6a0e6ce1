"""
statesoup: recurrent states of a small gated-linear language model as
first-class values that can be stored, retrieved and mixed.
"""

# Meta informations.
__version__ = '0.1.0'
__author__ = 'statesoup developers'
__author_email__ = 'statesoup-dev@users.noreply.github.com'
