"""
HoVeFL - Hybrid Horizontal/Vertical Federated Learning Simulator

Simulates one global model trained jointly by devices that split the data by samples
(horizontal) and by features (vertical), and checks recorded runs against the
convergence constants and bound of the protocol.
"""

__version__ = "0.1.0"
