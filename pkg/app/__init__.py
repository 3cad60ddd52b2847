# Ergodic HJB laboratory package
