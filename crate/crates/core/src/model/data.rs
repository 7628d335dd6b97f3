use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Labelled samples, each `[T, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Dataset<S: Scalar = f32> {
    pub samples: Vec<Tensor<S>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(samples: Vec<Tensor<S>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if samples.len() != labels.len() {
            return invalid(format!("{} samples but {} labels", samples.len(), labels.len()));
        }
        if let Some(first) = samples.first() {
            if first.rank() != 4 {
                return shape_err(format!("samples must be [T, C, H, W], got {:?}", first.shape()));
            }
            if let Some(s) = samples.iter().find(|s| s.shape() != first.shape()) {
                return shape_err(format!("sample shape {:?} differs from {:?}", s.shape(), first.shape()));
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return invalid(format!("label {l} out of range for {classes} classes"));
        }
        Ok(Dataset {
            samples,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stack the chosen samples into `[T, B, C, H, W]`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        let Some(&first) = idx.first() else {
            return invalid("empty batch");
        };
        let s = self.samples[first].shape().to_vec();
        let steps = s[0];
        let per = s[1] * s[2] * s[3];
        let b = idx.len();
        let mut data = vec![S::ZERO; steps * b * per];
        for (bi, &i) in idx.iter().enumerate() {
            let src = self.samples[i].data();
            for t in 0..steps {
                let dst = (t * b + bi) * per;
                data[dst..dst + per].copy_from_slice(&src[t * per..(t + 1) * per]);
            }
        }
        let x = Tensor::from_vec_unchecked(&[steps, b, s[1], s[2], s[3]], data)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// `(kept, rest)` by sample index.
    pub fn split(&self, keep: impl Fn(usize) -> bool) -> (Self, Self) {
        let mut a = (Vec::new(), Vec::new());
        let mut b = (Vec::new(), Vec::new());
        for (i, (s, &l)) in self.samples.iter().zip(&self.labels).enumerate() {
            let dst = if keep(i) { &mut a } else { &mut b };
            dst.0.push(s.clone());
            dst.1.push(l);
        }
        (
            Dataset {
                samples: a.0,
                labels: a.1,
                classes: self.classes,
            },
            Dataset {
                samples: b.0,
                labels: b.1,
                classes: self.classes,
            },
        )
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            samples: self.samples.iter().map(|s| s.cast()).collect(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_is_time_major() {
        let a = Tensor::<f32>::from_fn(&[2, 1, 1, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[2, 1, 1, 2], |i| 10.0 + i as f32);
        let d = Dataset::new(vec![a, b], vec![0, 1], 2).unwrap();
        let (x, y) = d.batch(&[1, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 2, 1, 1, 2]);
        assert_eq!(x.data(), &[10.0, 11.0, 0.0, 1.0, 12.0, 13.0, 2.0, 3.0]);
        assert_eq!(y, vec![1, 0]);
    }

    #[test]
    fn invalid_datasets() {
        let a = Tensor::<f32>::zeros(&[2, 1, 1, 2]);
        assert!(Dataset::new(vec![a.clone()], vec![3], 2).is_err());
        assert!(Dataset::new(vec![a.clone(), Tensor::zeros(&[2, 1, 2, 2])], vec![0, 0], 2).is_err());
        assert!(Dataset::new(vec![a], vec![], 2).is_err());
    }

    #[test]
    fn split_by_index() {
        let s: Vec<_> = (0..5).map(|i| Tensor::<f32>::full(&[1, 1, 1, 1], i as f32)).collect();
        let d = Dataset::new(s, vec![0, 1, 0, 1, 0], 2).unwrap();
        let (test, train) = d.split(|i| i % 5 == 4);
        assert_eq!(test.len(), 1);
        assert_eq!(train.len(), 4);
        assert_eq!(test.samples[0].data(), &[4.0]);
    }
}
