//! Head weights and their flat text file format.
//!
//! A weight file is a list of named tensors:
//!
//! ```text
//! spsmask-weights v1
//! tensor fcn.0.weight 256 256 3 3
//! 0.0123 -0.04 ...
//! tensor fcn.0.bias 256
//! ...
//! end
//! ```
//!
//! Each `tensor` line carries the name and the shape; the next line holds
//! the values in row-major order, space separated. Tensors are written in
//! name order so output is byte-stable.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{PipelineConfig, REFINE_STAGES};
use crate::error::{ensure, Error, Result};
use crate::params::{
    ConvKernel, DeformConvParams, Linear, Mlp, ProcessingKind, ProcessingModule, SfmParams, DEFORM_OFFSETS,
    SFM_DILATIONS,
};

/// Half-width of the uniform distribution used for generated weights.
pub const INIT_RANGE: f32 = 0.05;

/// A named n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Name -> tensor map, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap(pub BTreeMap<String, NamedTensor>);

impl TensorMap {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.0.insert(name.into(), NamedTensor { shape, data });
    }

    /// Removes and returns `name`, checking its shape. `role` names the
    /// dimension being checked in the error message.
    fn take(&mut self, name: &str, shape: &[usize], role: &str) -> Result<Vec<f32>> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| Error::invalid(format!("weights: missing tensor '{name}' ({role})")))?;
        ensure!(
            t.shape == shape,
            "weights: tensor '{name}' has shape {:?}, expected {:?} ({role})",
            t.shape,
            shape
        );
        Ok(t.data)
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "spsmask-weights v1")?;
        for (name, t) in &self.0 {
            write!(w, "tensor {name}")?;
            for d in &t.shape {
                write!(w, " {d}")?;
            }
            writeln!(w)?;
            for (k, v) in t.data.iter().enumerate() {
                if k > 0 {
                    w.write_all(b" ")?;
                }
                write!(w, "{v}")?;
            }
            writeln!(w)?;
        }
        writeln!(w, "end")
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = || -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n + 1, l)),
                Some((n, Err(e))) => Err(Error::parse(Some(n + 1), e.to_string())),
                None => Err(Error::parse(None, "unexpected end of weight file")),
            }
        };
        let (n, header) = next()?;
        if header.trim() != "spsmask-weights v1" {
            return Err(Error::parse(Some(n), format!("expected 'spsmask-weights v1', found '{header}'")));
        }
        let mut map = TensorMap::default();
        loop {
            let (n, line) = next()?;
            let line = line.trim();
            if line == "end" {
                return Ok(map);
            }
            let mut parts = line.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(Error::parse(Some(n), format!("expected 'tensor <name> <dims>', found '{line}'")));
            }
            let name = parts.next().ok_or_else(|| Error::parse(Some(n), "tensor without a name"))?.to_string();
            let shape = parts
                .map(str::parse::<usize>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(Some(n), format!("bad shape for tensor '{name}'")))?;
            let (n, values) = next()?;
            let data = values
                .split_whitespace()
                .map(str::parse::<f32>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(Some(n), format!("bad value in tensor '{name}'")))?;
            let want: usize = shape.iter().product();
            if data.len() != want {
                return Err(Error::parse(
                    Some(n),
                    format!("tensor '{name}' has {} values, shape {shape:?} needs {want}", data.len()),
                ));
            }
            if map.0.contains_key(&name) {
                return Err(Error::parse(Some(n), format!("duplicate tensor '{name}'")));
            }
            map.insert(name, shape, data);
        }
    }
}

/// Weights of one sparse refinement stage `s`, operating on `F = F_{s-1}`
/// before halving and `F_s = F / 2` after.
#[derive(Debug, Clone, PartialEq)]
pub struct StageWeights {
    /// Child MLPs `F -> F -> F`, indexed `2 * drow + dcol`.
    pub children: [Mlp; 4],
    /// `(F + sampled backbone channels) -> F -> F`.
    pub backbone_fusion: Mlp,
    /// One layer `F -> F/2`.
    pub halve: Mlp,
    pub processing: ProcessingModule,
    /// `F_s -> F_s -> 1`.
    pub seg_head: Mlp,
    /// `F_s -> F_s -> 1`.
    pub refine_head: Mlp,
}

/// Every parameter of the head.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineWeights {
    /// `2 F_0 -> F_0 -> F_0`.
    pub query_fusion: Mlp,
    /// Four dilation-1 convolutions `F_0 -> F_0`.
    pub fcn: [ConvKernel; 4],
    pub seg_head: Mlp,
    pub refine_head: Mlp,
    pub stages: [StageWeights; REFINE_STAGES],
}

fn mlp_shapes(prefix: &str, dims: &[usize]) -> Vec<(String, usize, usize)> {
    dims.windows(2).enumerate().map(|(i, d)| (format!("{prefix}.{i}"), d[0], d[1])).collect()
}

/// Shape catalogue: every tensor the config requires, built by `make`.
struct Builder<'a, F: FnMut(&str, &[usize]) -> Result<Vec<f32>>> {
    make: &'a mut F,
}

impl<F: FnMut(&str, &[usize]) -> Result<Vec<f32>>> Builder<'_, F> {
    fn linear(&mut self, name: &str, i: usize, o: usize) -> Result<Linear> {
        let w = (self.make)(&format!("{name}.weight"), &[o, i])?;
        let b = (self.make)(&format!("{name}.bias"), &[o])?;
        Linear::new(i, o, w, b)
    }

    fn mlp(&mut self, prefix: &str, dims: &[usize]) -> Result<Mlp> {
        let layers = mlp_shapes(prefix, dims)
            .into_iter()
            .map(|(n, i, o)| self.linear(&n, i, o))
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }

    fn conv(&mut self, name: &str, f_in: usize, f_out: usize, dilation: usize) -> Result<ConvKernel> {
        let w = (self.make)(&format!("{name}.weight"), &[f_out, f_in, 3, 3])?;
        let b = (self.make)(&format!("{name}.bias"), &[f_out])?;
        ConvKernel::new(f_in, f_out, dilation, &w, b)
    }

    fn build(&mut self, cfg: &PipelineConfig) -> Result<PipelineWeights> {
        let f0 = cfg.feature_dim;
        let query_fusion = self.mlp("query_fusion", &[2 * f0, f0, f0])?;
        let fcn = [
            self.conv("fcn.0", f0, f0, 1)?,
            self.conv("fcn.1", f0, f0, 1)?,
            self.conv("fcn.2", f0, f0, 1)?,
            self.conv("fcn.3", f0, f0, 1)?,
        ];
        let seg_head = self.mlp("stage0.seg_head", &[f0, f0, 1])?;
        let refine_head = self.mlp("stage0.refine_head", &[f0, f0, 1])?;
        let stages = [self.stage(cfg, 1)?, self.stage(cfg, 2)?, self.stage(cfg, 3)?];
        Ok(PipelineWeights { query_fusion, fcn, seg_head, refine_head, stages })
    }

    fn stage(&mut self, cfg: &PipelineConfig, s: usize) -> Result<StageWeights> {
        let f = cfg.feature_dim_at(s - 1);
        let fs = cfg.feature_dim_at(s);
        let cb = cfg.backbone_sample_dim(s);
        let p = format!("stage{s}");
        let children = [
            self.mlp(&format!("{p}.child0"), &[f, f, f])?,
            self.mlp(&format!("{p}.child1"), &[f, f, f])?,
            self.mlp(&format!("{p}.child2"), &[f, f, f])?,
            self.mlp(&format!("{p}.child3"), &[f, f, f])?,
        ];
        let backbone_fusion = self.mlp(&format!("{p}.backbone_fusion"), &[f + cb, f, f])?;
        let halve = self.mlp(&format!("{p}.halve"), &[f, fs])?;
        let processing = match cfg.processing {
            ProcessingKind::Mlp => ProcessingModule::Mlp(self.mlp(&format!("{p}.processing"), &[fs, fs, fs])?),
            ProcessingKind::Conv => ProcessingModule::Conv(self.conv(&format!("{p}.processing.conv"), fs, fs, 1)?),
            ProcessingKind::Deform => ProcessingModule::Deform(DeformConvParams::new(
                self.conv(&format!("{p}.processing.conv"), fs, fs, 1)?,
                self.linear(&format!("{p}.processing.offset"), fs, DEFORM_OFFSETS)?,
            )?),
            ProcessingKind::Sfm => {
                let mut convs = Vec::with_capacity(3);
                for (i, d) in SFM_DILATIONS.into_iter().enumerate() {
                    convs.push(self.conv(&format!("{p}.processing.conv{i}"), fs, fs, d)?);
                }
                let convs: [ConvKernel; 3] = convs.try_into().expect("three SFM kernels");
                ProcessingModule::Sfm(SfmParams::new(convs)?)
            }
        };
        let seg_head = self.mlp(&format!("{p}.seg_head"), &[fs, fs, 1])?;
        let refine_head = self.mlp(&format!("{p}.refine_head"), &[fs, fs, 1])?;
        Ok(StageWeights { children, backbone_fusion, halve, processing, seg_head, refine_head })
    }
}

fn build_with(cfg: &PipelineConfig, mut make: impl FnMut(&str, &[usize]) -> Result<Vec<f32>>) -> Result<PipelineWeights> {
    cfg.validate()?;
    Builder { make: &mut make }.build(cfg)
}

impl PipelineWeights {
    /// Every parameter drawn from `uniform(-0.05, 0.05)` with a ChaCha8
    /// stream seeded by `cfg.seed`, in a fixed tensor order.
    pub fn seeded(cfg: &PipelineConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        build_with(cfg, |_, shape| {
            let n = shape.iter().product();
            Ok((0..n).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect())
        })
    }

    /// Every parameter zero.
    pub fn zeros(cfg: &PipelineConfig) -> Result<Self> {
        build_with(cfg, |_, shape| Ok(vec![0.0; shape.iter().product()]))
    }

    /// Builds weights from a tensor map, rejecting missing, extra or
    /// mis-shaped tensors with a message naming the offending dimension.
    pub fn from_tensors(cfg: &PipelineConfig, mut map: TensorMap) -> Result<Self> {
        let w = build_with(cfg, |name, shape| {
            let role = describe_role(cfg, name);
            map.take(name, shape, &role)
        })?;
        if let Some(extra) = map.0.keys().next() {
            return Err(Error::invalid(format!(
                "weights: unexpected tensor '{extra}' for processing module '{}'",
                cfg.processing.name()
            )));
        }
        Ok(w)
    }

    pub fn to_tensors(&self) -> TensorMap {
        let mut map = TensorMap::default();
        let put_mlp = |map: &mut TensorMap, prefix: &str, m: &Mlp| {
            for (i, l) in m.layers().iter().enumerate() {
                put_linear(map, &format!("{prefix}.{i}"), l);
            }
        };
        put_mlp(&mut map, "query_fusion", &self.query_fusion);
        for (i, k) in self.fcn.iter().enumerate() {
            put_conv(&mut map, &format!("fcn.{i}"), k);
        }
        put_mlp(&mut map, "stage0.seg_head", &self.seg_head);
        put_mlp(&mut map, "stage0.refine_head", &self.refine_head);
        for (si, st) in self.stages.iter().enumerate() {
            let p = format!("stage{}", si + 1);
            for (c, m) in st.children.iter().enumerate() {
                put_mlp(&mut map, &format!("{p}.child{c}"), m);
            }
            put_mlp(&mut map, &format!("{p}.backbone_fusion"), &st.backbone_fusion);
            put_mlp(&mut map, &format!("{p}.halve"), &st.halve);
            match &st.processing {
                ProcessingModule::Mlp(m) => put_mlp(&mut map, &format!("{p}.processing"), m),
                ProcessingModule::Conv(k) => put_conv(&mut map, &format!("{p}.processing.conv"), k),
                ProcessingModule::Deform(d) => {
                    put_conv(&mut map, &format!("{p}.processing.conv"), d.base());
                    put_linear(&mut map, &format!("{p}.processing.offset"), d.offset_predictor());
                }
                ProcessingModule::Sfm(s) => {
                    for (i, k) in s.convs().iter().enumerate() {
                        put_conv(&mut map, &format!("{p}.processing.conv{i}"), k);
                    }
                }
            }
            put_mlp(&mut map, &format!("{p}.seg_head"), &st.seg_head);
            put_mlp(&mut map, &format!("{p}.refine_head"), &st.refine_head);
        }
        map
    }

    /// Checks the dimension chain against `cfg`.
    pub fn check(&self, cfg: &PipelineConfig) -> Result<()> {
        Self::from_tensors(cfg, self.to_tensors()).map(|_| ())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.to_tensors().write_text(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(cfg: &PipelineConfig, path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let map = TensorMap::read_text(std::io::BufReader::new(file))?;
        Self::from_tensors(cfg, map)
    }
}

fn put_linear(map: &mut TensorMap, name: &str, l: &Linear) {
    map.insert(format!("{name}.weight"), vec![l.out_dim(), l.in_dim()], l.weight().to_vec());
    map.insert(format!("{name}.bias"), vec![l.out_dim()], l.bias().to_vec());
}

fn put_conv(map: &mut TensorMap, name: &str, k: &ConvKernel) {
    map.insert(format!("{name}.weight"), vec![k.f_out(), k.f_in(), 3, 3], k.weight());
    map.insert(format!("{name}.bias"), vec![k.f_out()], k.bias().to_vec());
}

/// Human-readable description of which dimension a tensor is tied to.
fn describe_role(cfg: &PipelineConfig, name: &str) -> String {
    let stage = name
        .strip_prefix("stage")
        .and_then(|r| r.chars().next())
        .and_then(|c| c.to_digit(10))
        .map(|d| d as usize);
    match stage {
        Some(s) if s >= 1 && name.contains("backbone_fusion") => format!(
            "feature size F_{}={} plus backbone sample size {}",
            s - 1,
            cfg.feature_dim_at(s - 1),
            cfg.backbone_sample_dim(s)
        ),
        Some(s) if s >= 1 && (name.contains("child") || name.contains("halve")) => {
            format!("feature size F_{}={}", s - 1, cfg.feature_dim_at(s - 1))
        }
        Some(s) => format!("feature size F_{s}={}", cfg.feature_dim_at(s)),
        None => format!("feature size F_0={}", cfg.feature_dim),
    }
}
