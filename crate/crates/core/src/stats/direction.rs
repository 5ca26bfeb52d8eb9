use crate::error::{Result, TaqError};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Mean difference between task and contrast activations at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDirection {
    pub layer: usize,
    pub task: String,
    pub vector: Vec<f64>,
    /// How contrast prompts were chosen.
    pub policy: String,
}

/// Mean over the token rows of one prompt's activations.
pub fn mean_pool<T: Scalar>(acts: &Matrix<T>) -> Vec<f64> {
    let mut out = vec![0.0; acts.cols()];
    for r in 0..acts.rows() {
        for (o, &v) in out.iter_mut().zip(acts.row(r)) {
            *o += v.as_f64();
        }
    }
    let n = acts.rows().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// `d = (1/n) Σ_j (a(q_j) − a(q̃_j))` over pooled per-prompt activations.
pub fn task_direction(
    layer: usize,
    task: &str,
    policy: &str,
    acts_task: &[Vec<f64>],
    acts_contrast: &[Vec<f64>],
) -> Result<TaskDirection> {
    if acts_task.len() != acts_contrast.len() || acts_task.is_empty() {
        return Err(TaqError::InvalidInput(format!(
            "{} task prompts vs {} contrast prompts",
            acts_task.len(),
            acts_contrast.len()
        )));
    }
    let width = acts_task[0].len();
    let mut d = vec![0.0; width];
    for (a, b) in acts_task.iter().zip(acts_contrast) {
        if a.len() != width || b.len() != width {
            return Err(TaqError::InvalidShape(format!(
                "activation width {} / {} vs {width}",
                a.len(),
                b.len()
            )));
        }
        for ((o, x), y) in d.iter_mut().zip(a).zip(b) {
            *o += x - y;
        }
    }
    let n = acts_task.len() as f64;
    d.iter_mut().for_each(|v| *v /= n);
    Ok(TaskDirection {
        layer,
        task: task.to_string(),
        vector: d,
        policy: policy.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub cosine: f64,
    /// One of the directions had norm below 1e-12.
    pub degenerate: bool,
}

pub fn cosine_alignment(a: &TaskDirection, b: &TaskDirection) -> Result<Alignment> {
    if a.vector.len() != b.vector.len() {
        return Err(TaqError::InvalidShape(format!(
            "direction widths {} and {}",
            a.vector.len(),
            b.vector.len()
        )));
    }
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    let na = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Ok(Alignment {
            cosine: 0.0,
            degenerate: true,
        });
    }
    Ok(Alignment {
        cosine: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}
