# Numerical tools: phase space, forward models, solver, certificates, experiments, ultrasound
