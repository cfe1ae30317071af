//! Temperature-scaled distillation loss.

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Matrix};

fn check(student: &Matrix, teacher: &Matrix, temperature: f64) -> Result<()> {
    if student.shape() != teacher.shape() {
        return Err(Error::shape(
            "distill_loss",
            format!("student {:?} vs teacher {:?}", student.shape(), teacher.shape()),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

fn tempered_softmax(row: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let mut p: Vec<f64> = row.iter().map(|x| x / temperature).collect();
    softmax_in_place(&mut p)?;
    Ok(p)
}

/// `T² · mean_i KL(softmax(teacher_i / T) ‖ softmax(student_i / T))`.
pub fn distill_loss_value(student: &Matrix, teacher: &Matrix, temperature: f64) -> Result<f64> {
    check(student, teacher, temperature)?;
    let mut total = 0.0;
    for i in 0..student.rows() {
        let s: Vec<f64> = student.row(i).iter().map(|x| x / temperature).collect();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + s.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let pt = tempered_softmax(teacher.row(i), temperature)?;
        for (p, sv) in pt.iter().zip(&s) {
            if *p > 0.0 {
                total += p * (p.ln() - (sv - log_z));
            }
        }
    }
    Ok(temperature * temperature * total / student.rows() as f64)
}

/// Gradient of [`distill_loss_value`] with respect to the student logits:
/// `T · (p_student − p_teacher) / n`.
pub fn distill_loss_grad(student: &Matrix, teacher: &Matrix, temperature: f64) -> Result<Matrix> {
    check(student, teacher, temperature)?;
    let n = student.rows() as f64;
    let mut out = Matrix::zeros(student.rows(), student.cols(), student.precision());
    for i in 0..student.rows() {
        let ps = tempered_softmax(student.row(i), temperature)?;
        let pt = tempered_softmax(teacher.row(i), temperature)?;
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = temperature * (ps[j] - pt[j]) / n;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Precision;

    const D: Precision = Precision::Double;

    #[test]
    fn identical_logits_give_zero() {
        let m = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 3.0, 0.0]], D);
        assert!(distill_loss_value(&m, &m, 2.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn shift_invariant_in_student() {
        let s = Matrix::from_rows(&[vec![0.3, -1.0, 2.0]], D);
        let t = Matrix::from_rows(&[vec![1.0, 0.0, -1.0]], D);
        let a = distill_loss_value(&s, &t, 2.0).unwrap();
        let b = distill_loss_value(&s.map(|x| x + 17.0), &t, 2.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn two_class_closed_form() {
        let t = Matrix::from_rows(&[vec![0.0, 3f64.ln()]], D);
        let s = Matrix::from_rows(&[vec![0.0, 0.0]], D);
        let expect = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        assert!((distill_loss_value(&s, &t, 1.0).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn gradient_matches_differences() {
        let s = Matrix::from_rows(&[vec![0.3, -1.0, 2.0], vec![0.0, 1.0, 0.5]], D);
        let t = Matrix::from_rows(&[vec![1.0, 0.0, -1.0], vec![2.0, -2.0, 0.0]], D);
        let g = distill_loss_grad(&s, &t, 2.0).unwrap();
        let h = 1e-6;
        for idx in 0..6 {
            let mut p = s.clone();
            p.data_mut()[idx] += h;
            let mut m = s.clone();
            m.data_mut()[idx] -= h;
            let fd = (distill_loss_value(&p, &t, 2.0).unwrap() - distill_loss_value(&m, &t, 2.0).unwrap()) / (2.0 * h);
            assert!((fd - g.data()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Matrix::zeros(1, 3, D);
        let b = Matrix::zeros(2, 3, D);
        assert!(distill_loss_value(&a, &b, 1.0).is_err());
        assert!(distill_loss_value(&a, &a, 0.0).is_err());
    }
}
