//! Flat views over parameter and gradient containers, so the optimizer and
//! gradient reductions can work on any head shape.

pub trait ParamBuffers {
    fn buffers(&self) -> Vec<&[f64]>;
    fn buffers_mut(&mut self) -> Vec<&mut [f64]>;

    fn scalar_count(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    fn buffer_lens(&self) -> Vec<usize> {
        self.buffers().iter().map(|b| b.len()).collect()
    }

    /// `self += scale · other`, element by element in buffer order.
    fn add_scaled<O: ParamBuffers + ?Sized>(&mut self, other: &O, scale: f64) {
        let src = other.buffers();
        let mut dst = self.buffers_mut();
        assert_eq!(src.len(), dst.len(), "buffer count mismatch");
        for (d, s) in dst.iter_mut().zip(src) {
            assert_eq!(d.len(), s.len(), "buffer length mismatch");
            for (x, y) in d.iter_mut().zip(s) {
                *x += scale * y;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for b in self.buffers_mut() {
            b.iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn all_finite(&self) -> bool {
        self.buffers().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn flatten(&self) -> Vec<f64> {
        self.buffers().concat()
    }
}

impl ParamBuffers for Vec<f64> {
    fn buffers(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

impl ParamBuffers for Vec<Vec<f64>> {
    fn buffers(&self) -> Vec<&[f64]> {
        self.iter().map(Vec::as_slice).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().map(Vec::as_mut_slice).collect()
    }
}
