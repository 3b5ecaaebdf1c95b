//! Plane-sweep cost source: warps source features onto each depth plane of
//! the reference view and turns them into weighted cost maps.

use nlmvs_tensor::{ParameterStore, Scalar, Tape, Tensor, Var};

use crate::camera::{plane_homography, warp_features, Camera, CameraView, DepthHypothesisSet, PixelWindow};
use crate::error::{MvsError, Result};
use crate::features::{cost_map, extract_features, view_weight, FeatureConfig, FEATURE_CHANNELS};
use crate::stream::CostSource;

/// Features of every view of a scene, `[32, H, W]` each.
pub fn compute_features<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &FeatureConfig,
    views: &[CameraView<T>],
) -> Result<Vec<Tensor<T>>> {
    views
        .iter()
        .map(|v| {
            let mut tape = Tape::no_grad();
            let img = tape.constant(v.image.clone());
            let f = extract_features(&mut tape, store, cfg, img)?;
            Ok(tape.value(f).clone())
        })
        .collect()
}

/// How feature maps are placed on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureInput {
    Constant,
    /// Gradient-receiving leaves.
    Leaf,
}

/// Features of the reference and source views on one tape.
#[derive(Debug, Clone)]
pub struct SweepVars {
    /// Reference features restricted to the window.
    pub reference: Var,
    /// Full reference map as placed on the tape.
    pub reference_full: Var,
    pub sources: Vec<Var>,
}

#[derive(Debug)]
pub struct PlaneSweep<'a, T> {
    store: &'a ParameterStore<T>,
    cfg: &'a FeatureConfig,
    reference: &'a Camera,
    sources: Vec<&'a Camera>,
    reference_features: &'a Tensor<T>,
    source_features: Vec<&'a Tensor<T>>,
    hypotheses: &'a DepthHypothesisSet,
    window: PixelWindow,
    input: FeatureInput,
}

impl<'a, T: Scalar> PlaneSweep<'a, T> {
    /// `views[ref_index]` is the reference; all other views are sources.
    pub fn new(
        store: &'a ParameterStore<T>,
        cfg: &'a FeatureConfig,
        cameras: &'a [Camera],
        features: &'a [Tensor<T>],
        ref_index: usize,
        hypotheses: &'a DepthHypothesisSet,
    ) -> Result<Self> {
        if cameras.len() != features.len() {
            return Err(MvsError::Invalid(format!(
                "{} cameras but {} feature maps",
                cameras.len(),
                features.len()
            )));
        }
        if ref_index >= cameras.len() {
            return Err(MvsError::Invalid(format!(
                "reference view {ref_index} out of {} views",
                cameras.len()
            )));
        }
        if cameras.len() < 2 {
            return Err(MvsError::Invalid("plane sweep needs at least two views".into()));
        }
        for (cam, f) in cameras.iter().zip(features) {
            if f.shape() != [FEATURE_CHANNELS, cam.height(), cam.width()] {
                return Err(MvsError::Invalid(format!(
                    "features {:?} do not match a {}x{} camera",
                    f.shape(),
                    cam.height(),
                    cam.width()
                )));
            }
        }
        let reference = &cameras[ref_index];
        Ok(Self {
            store,
            cfg,
            reference,
            sources: cameras.iter().enumerate().filter(|&(i, _)| i != ref_index).map(|(_, c)| c).collect(),
            reference_features: &features[ref_index],
            source_features: features.iter().enumerate().filter(|&(i, _)| i != ref_index).map(|(_, f)| f).collect(),
            hypotheses,
            window: PixelWindow::full(reference.height(), reference.width()),
            input: FeatureInput::Constant,
        })
    }

    /// Restricts the cost maps to a window of reference pixels.
    pub fn with_window(mut self, window: PixelWindow) -> Result<Self> {
        if window.height == 0
            || window.width == 0
            || window.y0 + window.height > self.reference.height()
            || window.x0 + window.width > self.reference.width()
        {
            return Err(MvsError::Invalid(format!("window {window:?} outside the reference image")));
        }
        self.window = window;
        Ok(self)
    }

    pub fn with_input(mut self, input: FeatureInput) -> Self {
        self.input = input;
        self
    }

    pub fn window(&self) -> PixelWindow {
        self.window
    }

    pub fn hypotheses(&self) -> &DepthHypothesisSet {
        self.hypotheses
    }

    fn place(&self, tape: &mut Tape<T>, t: &Tensor<T>) -> Var {
        match self.input {
            FeatureInput::Constant => tape.constant(t.clone()),
            FeatureInput::Leaf => tape.leaf(t.clone()),
        }
    }
}

impl<T: Scalar> CostSource<T> for PlaneSweep<'_, T> {
    type Attached = SweepVars;

    fn num_planes(&self) -> usize {
        self.hypotheses.len()
    }

    fn size(&self) -> (usize, usize) {
        (self.window.height, self.window.width)
    }

    fn attach(&self, tape: &mut Tape<T>) -> Result<SweepVars> {
        let full = self.place(tape, self.reference_features);
        let w = self.window;
        let reference = if (w.height, w.width) == (self.reference.height(), self.reference.width()) {
            full
        } else {
            tape.crop(full, w.y0, w.x0, w.height, w.width)?
        };
        let sources = self.source_features.iter().map(|f| self.place(tape, f)).collect();
        Ok(SweepVars {
            reference,
            reference_full: full,
            sources,
        })
    }

    fn cost(&self, tape: &mut Tape<T>, at: &SweepVars, plane: usize) -> Result<Var> {
        let depth = self.hypotheses.values()[plane];
        let mut warped = Vec::with_capacity(self.sources.len());
        let mut weights = Vec::with_capacity(self.sources.len());
        let mut masks = Vec::with_capacity(self.sources.len());
        for (cam, &feat) in self.sources.iter().zip(&at.sources) {
            let h = plane_homography(self.reference, cam, depth)?;
            let (f, m) = warp_features(tape, feat, &h, self.window)?;
            let diff = tape.sub(f, at.reference)?;
            let w = view_weight(tape, self.store, self.cfg, diff)?;
            warped.push(f);
            weights.push(w);
            masks.push(m);
        }
        Ok(cost_map(tape, at.reference, &warped, &weights, &masks)?.cost)
    }
}
