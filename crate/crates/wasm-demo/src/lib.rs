//! WebAssembly bindings for the static demo page in `www/`.
//!
//! [`DemoState`] holds the logic and is plain Rust so it can be tested
//! natively; [`Demo`] wraps it for JavaScript.

use wasm_bindgen::prelude::*;

use lidar_sr::eval::l1_metric;
use lidar_sr::geom::{denormalize, normalize, subsample_rows, NormalizedImage, Pose, RangeImage, SensorIntrinsics};
use lidar_sr::nn::{decode_model, Network};
use lidar_sr::sim::{raycast_scan, Scene};
use lidar_sr::upscale::{mc_passes, nn_infer, summarize_ensemble, upscale_cubic, upscale_linear, McConfig};
use lidar_sr::{Error, Result};

pub struct DemoState {
    scene: Scene,
    sensor: SensorIntrinsics,
    factor: usize,
    high: Option<RangeImage>,
    low: Option<RangeImage>,
    network: Option<Network<f32>>,
    passes: Vec<Vec<f32>>,
}

impl DemoState {
    /// A 64-beam sensor in the built-in office, upscaling by `factor`.
    pub fn new(columns: usize, factor: usize) -> Result<Self> {
        let sensor = SensorIntrinsics::new(64, columns)?;
        sensor.subsampled(factor)?;
        Ok(DemoState { scene: Scene::office(), sensor, factor, high: None, low: None, network: None, passes: Vec::new() })
    }

    pub fn rows(&self) -> usize {
        self.sensor.channels
    }

    pub fn cols(&self) -> usize {
        self.sensor.h_res
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Ray casts the office from a pose and keeps the scan and its
    /// subsampled rows. Returns the full scan in meters.
    pub fn simulate(&mut self, x: f64, y: f64, height: f64, yaw_deg: f64) -> Result<Vec<f32>> {
        let pose = Pose::new([x, y, height], yaw_deg.to_radians());
        pose.validate()?;
        let high = raycast_scan(&self.scene, &pose, &self.sensor)?;
        self.low = Some(subsample_rows(&high, self.factor)?);
        self.high = Some(high.clone());
        self.passes.clear();
        Ok(high.into_data())
    }

    fn pair(&self) -> Result<(&RangeImage, &RangeImage)> {
        match (&self.low, &self.high) {
            (Some(l), Some(h)) => Ok((l, h)),
            _ => Err(Error::Config("simulate a scan first".into())),
        }
    }

    /// The subsampled input in meters.
    pub fn low(&self) -> Result<Vec<f32>> {
        Ok(self.pair()?.0.as_slice().to_vec())
    }

    fn network(&self) -> Result<&Network<f32>> {
        self.network.as_ref().ok_or_else(|| Error::Config("load a model first".into()))
    }

    fn upscaled(&self, method: &str) -> Result<NormalizedImage> {
        let low = normalize(self.pair()?.0);
        match method {
            "linear" => upscale_linear(&low, self.factor),
            "cubic" => upscale_cubic(&low, self.factor),
            "nn" => nn_infer(&low, self.network()?),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }

    /// Upscaled scan in meters and its L1 error against the full scan.
    pub fn upscale(&self, method: &str) -> Result<(Vec<f32>, f64)> {
        let img = self.upscaled(method)?;
        let l1 = l1_metric(&img, &normalize(self.pair()?.1))?;
        Ok((denormalize(&img).into_data(), l1))
    }

    pub fn load_model(&mut self, blob: &[u8], sidecar: &str) -> Result<()> {
        let model = decode_model(blob, sidecar)?;
        if model.network.spec.upscale_factor != self.factor {
            return Err(Error::Config(format!(
                "model upscales by {}, demo is set to {}",
                model.network.spec.upscale_factor, self.factor
            )));
        }
        self.network = Some(model.network);
        self.passes.clear();
        Ok(())
    }

    /// Runs and caches the dropout-active passes for the current scan.
    pub fn run_passes(&mut self, passes: usize, seed: u64) -> Result<()> {
        let low = normalize(self.pair()?.0);
        let cfg = McConfig { passes, seed, ..Default::default() };
        self.passes = mc_passes(&low, self.network()?, &cfg)?;
        Ok(())
    }

    /// Filters the cached passes at `lambda`: the kept scan in meters and
    /// the percentage of predicted pixels removed.
    pub fn filter(&self, lambda: f64) -> Result<(Vec<f32>, f64)> {
        if self.passes.is_empty() {
            return Err(Error::Config("run the Monte-Carlo passes first".into()));
        }
        if !(lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        let e = summarize_ensemble(&self.passes, lambda)?;
        let img = NormalizedImage::new(self.sensor, e.filtered)?;
        Ok((denormalize(&img).into_data(), e.removed_pct))
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Scan images cross the boundary as row-major `Float32Array`s in meters.
#[wasm_bindgen]
pub struct Demo {
    state: DemoState,
    last_metric: f64,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(columns: usize, factor: usize) -> std::result::Result<Demo, JsError> {
        Ok(Demo { state: DemoState::new(columns, factor).map_err(js)?, last_metric: f64::NAN })
    }

    pub fn rows(&self) -> usize {
        self.state.rows()
    }

    pub fn cols(&self) -> usize {
        self.state.cols()
    }

    pub fn factor(&self) -> usize {
        self.state.factor()
    }

    pub fn simulate_scan(&mut self, x: f64, y: f64, height: f64, yaw_deg: f64) -> std::result::Result<Vec<f32>, JsError> {
        self.state.simulate(x, y, height, yaw_deg).map_err(js)
    }

    pub fn low_scan(&self) -> std::result::Result<Vec<f32>, JsError> {
        self.state.low().map_err(js)
    }

    /// `method` is `linear`, `cubic` or `nn`. The L1 error is available from
    /// `last_metric` afterwards.
    pub fn upscale_compare(&mut self, method: &str) -> std::result::Result<Vec<f32>, JsError> {
        let (img, l1) = self.state.upscale(method).map_err(js)?;
        self.last_metric = l1;
        Ok(img)
    }

    pub fn load_model(&mut self, blob: &[u8], sidecar: &str) -> std::result::Result<(), JsError> {
        self.state.load_model(blob, sidecar).map_err(js)
    }

    pub fn run_passes(&mut self, passes: usize, seed: u32) -> std::result::Result<(), JsError> {
        self.state.run_passes(passes, seed as u64).map_err(js)
    }

    /// Filtered scan; the removed percentage is available from `last_metric`.
    pub fn filter(&mut self, lambda: f64) -> std::result::Result<Vec<f32>, JsError> {
        let (img, pct) = self.state.filter(lambda).map_err(js)?;
        self.last_metric = pct;
        Ok(img)
    }

    /// L1 error of the last `upscale_compare` or removed percentage of the
    /// last `filter`.
    pub fn last_metric(&self) -> f64 {
        self.last_metric
    }
}
