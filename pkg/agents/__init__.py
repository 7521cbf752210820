# Pipeline phase agents: teacher, training, evaluation
