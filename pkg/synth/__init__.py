# Synthetic world package
