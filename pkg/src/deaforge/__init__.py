"""Robust interaction-control synthesis for dielectric elastomer actuators.

Modules: :mod:`.plant` (quasi-LPV actuator model), :mod:`.impedance`
(target mechanics and shaping filters), :mod:`.augment` (augmented plant),
:mod:`.lmi` (matrix-inequality data model and solver adapter),
:mod:`.synthesis` (gridded LMI design and certificate checks), :mod:`.sim`
(closed-loop simulation), :mod:`.selfsense` (RLS displacement self-sensing)
and :mod:`.cli` (campaign front end).
"""

__version__ = "0.1.0"
