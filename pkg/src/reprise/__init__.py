"""Recurrent forward models with retrospective and prospective inference.

Modules: netcore (RNN/LSTM + BPTT), optim (Adam, schedules), simworld
(vehicles, babbling), control (the inference/control loop), trainer
(labeled and emergent model learning), experiments (evaluations and
analyses), cli (command line).
"""

__version__ = "0.1.0"
