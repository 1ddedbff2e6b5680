# Torch modules: layers and the SPRINT network
