"""Moving-horizon vehicle state and tire-force estimation.

Submodules:
    vehicle       geometry, tricycle kinematics, tire model, process dynamics
    radar         Doppler measurement model, ego-velocity, rotation calibration
    longitudinal  engine/brake/differential models and loss forces
    mhe           receding-horizon estimator
    simulator     ground-truth plant and sensor synthesis
    logio         column-text measurement log format
    metrics       accuracy metrics against simulator truth
    cli           command-line harness
"""

__version__ = "0.1.0"
