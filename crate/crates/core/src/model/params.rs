use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named slice of a [`ParameterVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Segment {
            name: name.into(),
            shape,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat model weights plus the layout that gives them meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParameterVector {
    pub fn new(layout: Vec<Segment>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = layout.iter().map(Segment::len).sum();
        if expected != values.len() {
            return Err(Error::invalid(format!(
                "layout describes {expected} values but {} were given",
                values.len()
            )));
        }
        Ok(ParameterVector { values, layout })
    }

    pub fn zeros(layout: Vec<Segment>) -> Self {
        let n = layout.iter().map(Segment::len).sum();
        ParameterVector {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParameterVector) -> bool {
        self.layout == other.layout
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Values of the named segment.
    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        let mut offset = 0;
        for seg in &self.layout {
            if seg.name == name {
                return Some(&self.values[offset..offset + seg.len()]);
            }
            offset += seg.len();
        }
        None
    }

    /// Adopt `layout` if it has the same segment names and sizes as ours.
    ///
    /// Wire-decoded vectors only carry flat segment lengths; this restores
    /// the shapes the receiving side expects.
    pub fn conform_to(mut self, layout: &[Segment]) -> Result<Self> {
        let compatible = self.layout.len() == layout.len()
            && self
                .layout
                .iter()
                .zip(layout)
                .all(|(a, b)| a.name == b.name && a.len() == b.len());
        if !compatible {
            return Err(Error::invalid(format!(
                "parameter layout mismatch: got [{}], expected [{}]",
                describe(&self.layout),
                describe(layout)
            )));
        }
        self.layout = layout.to_vec();
        Ok(self)
    }
}

fn describe(layout: &[Segment]) -> String {
    layout
        .iter()
        .map(|s| format!("{}:{}", s.name, s.len()))
        .collect::<Vec<_>>()
        .join(", ")
}
