"""
Distilling a 50-step teacher into a 5-step student
==================================================

The student starts from the teacher's parameters and learns the
teacher's 10-step jumps between key timesteps directly from the
trajectory store, with a queue-based adversarial pass aligning its
per-timestep latent distributions. Sampling then needs 5 model
evaluations instead of 50.
"""

import numpy as np

import flowdistill as fd

data = fd.ToyDataset(np.array([-3.0, 3.0]))
teacher, _ = fd.train_teacher(data, iterations=2000, batch_size=512, lr=3e-4, seed=0)

grid = fd.TimeGrid.uniform(50)
store = fd.generate_store(teacher, N=1024, grid=grid, seed=1)

config = fd.DistillConfig(m=5, n=50, iterations=800, batch_size=128,
                          lambda_adv=0.1, seed=2)
result = fd.distill(teacher, store, config)
print(f"metrics rows: {len(result.metrics)}, heads: {len(result.heads)}")
first, last = result.metrics[0], result.metrics[-1]
print(f"trajectory loss: {first[2]:.4f} (start) -> {last[2]:.4f} (end)")

# identical noise draws through both models
rng = np.random.default_rng(3)
Z = rng.standard_normal((4096, 1))
teacher_samples = fd.denoise_batch(teacher, Z, grid)[0]

schedule = fd.make_key_schedule(50, 5)
before = result.student.eval_count
student_samples, nfe = fd.sample_student_batch(result.student, schedule, Z)
print(f"\nstudent evaluations per batch: {result.student.eval_count - before} "
      f"(nfe={nfe}) vs teacher {grid.n}: {grid.n // nfe}x fewer steps")

w1 = fd.w1_distance(student_samples[:, 0], teacher_samples[:, 0])
print(f"W1(student 5-step, teacher 50-step) = {w1:.4f}")
print(f"student endpoint error: {fd.endpoint_error(student_samples, data.support):.4f}")
print(f"teacher endpoint error: {fd.endpoint_error(teacher_samples, data.support):.4f}")
