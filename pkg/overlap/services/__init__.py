# Overlap Services (codec, peers, scene, annotation, evaluation)
