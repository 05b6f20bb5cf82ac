//! Rendering of expression coefficients into frames of a target sequence.

use std::time::{Duration, Instant};

use puppetry_core::checkpoint::Checkpoint;
use puppetry_core::face_model::{
    reconstruct_vertices, ExpressionCoefficients, FaceBasis, FaceTopology, ShapeCoefficients,
};
use puppetry_core::nn::FeatureMap;
use puppetry_core::renderer::{erode_background, rasterize, CameraPose, DeferredRenderer};
use puppetry_core::training::load_renderer_with_radius;

use crate::layout::SequenceDir;

/// Everything needed to turn expression coefficients into a frame of the target.
pub struct Scene {
    pub basis: FaceBasis,
    pub topology: FaceTopology,
    pub shape: ShapeCoefficients,
    pub renderer: DeferredRenderer<f32>,
    pub erosion_radius: usize,
    pub resolution: usize,
}

#[derive(Default)]
pub struct StageTimes {
    pub rasterization: Duration,
    pub rendering: Duration,
}

impl Scene {
    pub fn from_sequence(
        target: &SequenceDir,
        shape: ShapeCoefficients,
        renderer_ckpt: &Checkpoint,
    ) -> anyhow::Result<Self> {
        let (renderer, erosion_radius) = load_renderer_with_radius(renderer_ckpt)?;
        Ok(Self {
            basis: target.basis()?,
            topology: target.topology()?,
            shape,
            renderer,
            erosion_radius,
            resolution: target.manifest.resolution,
        })
    }

    /// Renders `delta` under `pose` over `source` with the face region of
    /// both the new geometry and `source_mask` eroded away.
    pub fn render(
        &self,
        delta: &ExpressionCoefficients,
        pose: &CameraPose,
        source: &FeatureMap<f32>,
        source_mask: &[bool],
        times: &mut StageTimes,
    ) -> anyhow::Result<FeatureMap<f32>> {
        let t0 = Instant::now();
        let verts = reconstruct_vertices(&self.basis, &self.shape, delta)?;
        let res = self.resolution;
        let uvmap = rasterize(
            &verts,
            &self.topology.triangles,
            &self.topology.uvs,
            pose,
            res,
            res,
        )?;
        times.rasterization += t0.elapsed();
        let t1 = Instant::now();
        let union: Vec<bool> = uvmap
            .covered
            .iter()
            .zip(source_mask)
            .map(|(a, b)| *a || *b)
            .collect();
        let background = erode_background(source, &union, self.erosion_radius)?;
        let mut img = self.renderer.render(&uvmap, &background)?.final_image;
        img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        times.rendering += t1.elapsed();
        Ok(img)
    }
}
