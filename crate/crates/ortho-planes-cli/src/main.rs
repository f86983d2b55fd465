//! Command-line front end for the ortho-planes library.
//!
//! Subcommands cover the full pipeline: `synth` generates labeled synthetic
//! scenes, `detect` finds orthogonal plane structure in a point cloud,
//! `refine` polishes a detected plane graph and its corners, `register`
//! aligns two clouds with corner-constrained ICP, `eval` scores detections
//! against a reference, and `bench` reports stage timings.
//!
//! All randomized stages take an explicit `--seed`; for a fixed seed and
//! parameter set every output file is byte-reproducible.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ortho_planes::detect::detect_opps;
use ortho_planes::eval::{evaluate_lines, evaluate_planes, label_points, DetectionReport};
use ortho_planes::export::{
    format_transform, parse_transform, read_json, write_json, GraphJson, SceneJson,
};
use ortho_planes::graph::{
    build_graph, enumerate_triangles, reduce_parallel, ClusterParams, CornerTriangle, PlaneGraph,
};
use ortho_planes::io::{
    downsample_at, estimate_normals, generate_synthetic_scene, load_point_cloud,
    save_labeled_point_cloud, save_point_cloud, Layout, PlyFormat, SyntheticSpec,
};
use ortho_planes::refine::{
    corner_from_planes, refine_corner, refine_graph, select_corner_support, RefinementParams,
};
use ortho_planes::register::{
    compute_rpe, constrained_icp, match_corners, IcpParams, RigidMotion,
};
use ortho_planes::{Corner, DetectionParams, Line3D, Plane, PointCloud, Vec3};
use serde::Serialize;
use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

/// Neighborhood size for normal estimation when the input PLY has none.
const NORMAL_K: usize = 20;

#[derive(Parser)]
#[command(
    name = "ortho-planes",
    version,
    about = "Orthogonal plane pair detection, refinement and registration for point clouds",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene as a PLY cloud plus reference primitives.
    Synth(SynthArgs),
    /// Detect orthogonal planes and export the plane graph and primitives.
    Detect(DetectArgs),
    /// Refine a detected plane graph and its corners against the cloud.
    Refine(RefineArgs),
    /// Align a source cloud onto a destination cloud.
    Register(RegisterArgs),
    /// Score detected primitives against a reference set.
    Eval(EvalArgs),
    /// Time the detection and refinement stages on a synthetic scene.
    Bench(BenchArgs),
}

// ---------------------------------------------------------------------------
// Shared parameter flags and config-file resolution
// ---------------------------------------------------------------------------

/// Tuning knobs shared by the pipeline subcommands. Angles are taken in
/// degrees on the command line and converted to radians internally. Every
/// flag can also be set through `--config` (a `key = value` file using the
/// same names); explicit flags win over the file, which wins over defaults.
#[derive(Args, Debug, Default, Clone)]
struct ParamFlags {
    /// Normal agreement tolerance for pairing and matching, degrees.
    #[arg(long, value_name = "DEG")]
    delta_n: Option<f64>,
    /// Pairing radius: the largest point-pair distance considered, meters.
    #[arg(long, value_name = "M")]
    tau_d: Option<f64>,
    /// Number of reference points sampled for voting.
    #[arg(long, value_name = "N")]
    n_refs: Option<usize>,
    /// Maximum pairing partners per reference point.
    #[arg(long, value_name = "N")]
    k_pairs: Option<usize>,
    /// Accumulator angle bin width, degrees.
    #[arg(long, value_name = "DEG")]
    theta_bin: Option<f64>,
    /// Accumulator distance bin width, meters.
    #[arg(long, value_name = "M")]
    rho_bin: Option<f64>,
    /// Strict vote threshold: a candidate needs more votes than this.
    #[arg(long, value_name = "N")]
    c_max: Option<usize>,
    /// Plane clustering: max anchor-to-plane distance to merge, meters.
    #[arg(long, value_name = "M")]
    merge_dist: Option<f64>,
    /// Minimum hypotheses per cluster to keep it as a plane.
    #[arg(long, value_name = "N")]
    min_support: Option<usize>,
    /// Corner support band half-width, meters.
    #[arg(long, value_name = "M")]
    epsilon: Option<f64>,
    /// Orthogonality penalty weight in graph refinement.
    #[arg(long, value_name = "W")]
    lambda: Option<f64>,
    /// Normal gate for point-to-plane assignment, degrees.
    #[arg(long, value_name = "DEG")]
    eps_n: Option<f64>,
    /// Huber loss scale for graph refinement, meters.
    #[arg(long, value_name = "M")]
    huber_scale: Option<f64>,
    /// Refinement iteration cap per hierarchy level.
    #[arg(long, value_name = "N")]
    refine_iterations: Option<usize>,
    /// Coarse-to-fine hierarchy depth for graph refinement.
    #[arg(long, value_name = "N")]
    levels: Option<usize>,
    /// Voxel size for input downsampling, meters (omit to keep all points).
    #[arg(long, value_name = "M")]
    d_min: Option<f64>,
    /// Parameter file with `key = value` lines; flags override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

/// Fully resolved pipeline parameters.
struct Params {
    detection: DetectionParams,
    cluster: ClusterParams,
    refinement: RefinementParams,
    /// Optional preprocessing voxel size, meters.
    d_min: Option<f64>,
}

const CONFIG_KEYS: &[&str] = &[
    "delta_n",
    "tau_d",
    "n_refs",
    "k_pairs",
    "theta_bin",
    "rho_bin",
    "c_max",
    "merge_dist",
    "min_support",
    "epsilon",
    "lambda",
    "eps_n",
    "huber_scale",
    "refine_iterations",
    "levels",
    "d_min",
];

fn parse_config(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut map = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            anyhow!(
                "{}:{}: expected `key = value`, got {raw:?}",
                path.display(),
                idx + 1
            )
        })?;
        let key = key.trim().to_string();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            bail!("{}:{}: unknown parameter {key:?}", path.display(), idx + 1);
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

/// Flag value if given, else the config-file value, else `None`.
fn pick<T>(flag: Option<T>, cfg: &HashMap<String, String>, key: &str) -> Result<Option<T>>
where
    T: FromStr,
    T::Err: Display,
{
    if flag.is_some() {
        return Ok(flag);
    }
    match cfg.get(key) {
        Some(text) => text
            .parse::<T>()
            .map(Some)
            .map_err(|e| anyhow!("config key {key} = {text:?}: {e}")),
        None => Ok(None),
    }
}

impl ParamFlags {
    fn resolve(&self) -> Result<Params> {
        let cfg = match &self.config {
            Some(path) => parse_config(path)?,
            None => HashMap::new(),
        };

        let mut det = DetectionParams::default();
        if let Some(v) = pick(self.delta_n, &cfg, "delta_n")? {
            det.delta_n = v.to_radians();
        }
        if let Some(v) = pick(self.tau_d, &cfg, "tau_d")? {
            det.tau_d = v;
        }
        if let Some(v) = pick(self.n_refs, &cfg, "n_refs")? {
            det.n_refs = v;
        }
        if let Some(v) = pick(self.k_pairs, &cfg, "k_pairs")? {
            det.k_pairs = v;
        }
        if let Some(v) = pick(self.theta_bin, &cfg, "theta_bin")? {
            det.theta_bin = v.to_radians();
        }
        if let Some(v) = pick(self.rho_bin, &cfg, "rho_bin")? {
            det.rho_bin = v;
        }
        if let Some(v) = pick(self.c_max, &cfg, "c_max")? {
            det.c_max = v;
        }

        // Clustering reuses the pairing tolerance for normal agreement.
        let mut cluster = ClusterParams {
            merge_angle: det.delta_n,
            parallel_angle: det.delta_n,
            ..ClusterParams::default()
        };
        if let Some(v) = pick(self.merge_dist, &cfg, "merge_dist")? {
            cluster.merge_dist = v;
        }
        if let Some(v) = pick(self.min_support, &cfg, "min_support")? {
            cluster.min_support = v;
        }

        let mut refinement = RefinementParams::default();
        if let Some(v) = pick(self.epsilon, &cfg, "epsilon")? {
            refinement.epsilon = v;
        }
        if let Some(v) = pick(self.lambda, &cfg, "lambda")? {
            refinement.lambda = v;
        }
        if let Some(v) = pick(self.eps_n, &cfg, "eps_n")? {
            refinement.eps_n = v.to_radians();
        }
        if let Some(v) = pick(self.huber_scale, &cfg, "huber_scale")? {
            refinement.loss = ortho_planes::refine::RobustLoss::Huber { scale: v };
        }
        if let Some(v) = pick(self.refine_iterations, &cfg, "refine_iterations")? {
            refinement.max_iterations = v;
        }
        if let Some(v) = pick(self.levels, &cfg, "levels")? {
            refinement.hierarchy_levels = v;
        }

        let d_min = pick(self.d_min, &cfg, "d_min")?;
        if let Some(v) = d_min {
            if v <= 0.0 {
                bail!("d_min must be positive, got {v}");
            }
        }

        Ok(Params {
            detection: det,
            cluster,
            refinement,
            d_min,
        })
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LayoutArg {
    /// Three mutually orthogonal faces meeting in one corner.
    CornerRoom,
    /// A wall and a floor: one orthogonal pair, no corner.
    TwoWalls,
    /// Floor plus four walls: an open box.
    Box,
    /// A single floor patch.
    SinglePlane,
    /// Unstructured clutter with random normals.
    NoiseBall,
}

impl From<LayoutArg> for Layout {
    fn from(arg: LayoutArg) -> Self {
        match arg {
            LayoutArg::CornerRoom => Layout::CornerRoom,
            LayoutArg::TwoWalls => Layout::TwoWalls,
            LayoutArg::Box => Layout::Box,
            LayoutArg::SinglePlane => Layout::SinglePlane,
            LayoutArg::NoiseBall => Layout::NoiseBall,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Ascii,
    Binary,
}

impl From<FormatArg> for PlyFormat {
    fn from(arg: FormatArg) -> Self {
        match arg {
            FormatArg::Ascii => PlyFormat::Ascii,
            FormatArg::Binary => PlyFormat::BinaryLittleEndian,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Scene layout.
    #[arg(value_enum)]
    layout: LayoutArg,
    /// Output PLY path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Reference primitives JSON path.
    #[arg(long, value_name = "FILE")]
    gt: Option<PathBuf>,
    /// Face side length, meters.
    #[arg(long, default_value_t = 2.0, value_name = "M")]
    extent: f64,
    /// Surface sampling density, points per square meter.
    #[arg(long, default_value_t = 2000.0, value_name = "PTS_PER_M2")]
    density: f64,
    /// Gaussian noise along the surface normal, meters (std-dev).
    #[arg(long, default_value_t = 0.003, value_name = "M")]
    sigma: f64,
    /// Uniform outlier fraction in [0, 1].
    #[arg(long, default_value_t = 0.0, value_name = "FRAC")]
    outliers: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// PLY encoding.
    #[arg(long, value_enum, default_value_t = FormatArg::Binary)]
    format: FormatArg,
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        layout: args.layout.into(),
        extent: args.extent,
        points_per_m2: args.density,
        noise_sigma: args.sigma,
        outlier_fraction: args.outliers,
        seed: args.seed,
    };
    let (cloud, gt) = generate_synthetic_scene(&spec);
    save_point_cloud(&args.out, &cloud, args.format.into())
        .with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(gt_path) = &args.gt {
        write_json(gt_path, &SceneJson::from_ground_truth(&gt))
            .with_context(|| format!("writing {}", gt_path.display()))?;
    }
    println!(
        "synth: {} points, {} planes, {} lines, {} corners -> {}",
        cloud.len(),
        gt.planes.len(),
        gt.lines.len(),
        gt.corners.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// detect
// ---------------------------------------------------------------------------

#[derive(Args)]
struct DetectArgs {
    /// Input point cloud (PLY).
    input: PathBuf,
    /// Output stem: writes <out>.graph.json, <out>.primitives.json and
    /// <out>.labeled.ply.
    #[arg(long, value_name = "STEM")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the labeled point cloud output.
    #[arg(long)]
    no_labels: bool,
    #[command(flatten)]
    params: ParamFlags,
}

/// `<stem>` + literal suffix, preserving the whole stem path.
fn stem_path(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Loads a cloud and guarantees normals, estimating them when absent.
fn load_cloud_with_normals(path: &Path) -> Result<PointCloud> {
    let cloud =
        load_point_cloud(path).with_context(|| format!("reading {}", path.display()))?;
    if cloud.has_normals {
        return Ok(cloud);
    }
    estimate_normals(&cloud, NORMAL_K)
        .with_context(|| format!("estimating normals for {}", path.display()))
}

fn preprocess(cloud: PointCloud, d_min: Option<f64>) -> PointCloud {
    match d_min {
        Some(cell) => downsample_at(&cloud, cell),
        None => cloud,
    }
}

/// Lines where planes joined by a graph edge intersect. Near-parallel pairs
/// (which cannot produce a stable line) are skipped.
fn edge_lines(vertices: &[Plane], edges: &[(usize, usize)]) -> Vec<Line3D> {
    edges
        .iter()
        .filter_map(|&(i, j)| ortho_planes::intersect_two_planes(&vertices[i], &vertices[j]).ok())
        .collect()
}

/// Corners where the three planes of each triangle meet. Degenerate
/// triples are skipped.
fn triangle_corners(vertices: &[Plane], triangles: &[CornerTriangle]) -> Vec<Corner> {
    triangles
        .iter()
        .filter_map(|t| {
            let [i, j, k] = t.plane_indices;
            corner_from_planes(&vertices[i], &vertices[j], &vertices[k]).ok()
        })
        .collect()
}

fn run_detect(args: &DetectArgs) -> Result<()> {
    let params = args.params.resolve()?;
    let cloud = preprocess(load_cloud_with_normals(&args.input)?, params.d_min);

    let candidates = detect_opps(&cloud, &params.detection, args.seed)?;
    let graph = build_graph(&candidates, &params.detection, &params.cluster);
    let triangles = enumerate_triangles(&graph);
    let bundles = reduce_parallel(&graph, params.cluster.parallel_angle)?;
    let lines = edge_lines(&graph.vertices, &graph.edges);
    let corners = triangle_corners(&graph.vertices, &triangles);

    let graph_path = stem_path(&args.out, ".graph.json");
    let prim_path = stem_path(&args.out, ".primitives.json");
    write_json(&graph_path, &GraphJson::from_parts(&graph, &triangles, &bundles))?;
    write_json(
        &prim_path,
        &SceneJson::from_parts(&graph.vertices, &graph.edges, &lines, &corners),
    )?;

    let mut outputs = vec![graph_path.display().to_string(), prim_path.display().to_string()];
    if !args.no_labels {
        let labels = label_points(
            &cloud,
            &bundles,
            params.refinement.epsilon,
            params.refinement.eps_n,
        );
        let label_path = stem_path(&args.out, ".labeled.ply");
        save_labeled_point_cloud(&label_path, &cloud, &labels, PlyFormat::BinaryLittleEndian)?;
        outputs.push(label_path.display().to_string());
    }

    println!(
        "detect: {} candidates -> {} planes, {} edges, {} triangles, {} bundles, {} lines, {} corners",
        candidates.len(),
        graph.vertices.len(),
        graph.edges.len(),
        triangles.len(),
        bundles.len(),
        lines.len(),
        corners.len()
    );
    println!("wrote {}", outputs.join(" "));
    Ok(())
}

// ---------------------------------------------------------------------------
// refine
// ---------------------------------------------------------------------------

#[derive(Args)]
struct RefineArgs {
    /// Input point cloud (PLY).
    input: PathBuf,
    /// Plane graph JSON produced by `detect`.
    graph: PathBuf,
    /// Output stem: writes <out>.graph.json and <out>.primitives.json.
    #[arg(long, value_name = "STEM")]
    out: PathBuf,
    #[command(flatten)]
    params: ParamFlags,
}

/// Offset of a member plane measured against the bundle normal (planes keep
/// their own sign convention, so align first).
fn offset_against(plane: &Plane, normal: &Vec3) -> f64 {
    if plane.normal.dot(normal) >= 0.0 {
        plane.offset
    } else {
        -plane.offset
    }
}

/// Rebuilds each graph vertex from the refined bundles: the vertex keeps its
/// identity (so edges and triangles stay valid) but takes the refined shared
/// normal and the refined offset nearest to its original one.
fn remap_vertices(
    graph: &PlaneGraph,
    original: &[ortho_planes::graph::ParallelBundle],
    refined: &[ortho_planes::graph::ParallelBundle],
) -> Vec<Plane> {
    let mut planes = graph.vertices.clone();
    for (orig, new) in original.iter().zip(refined) {
        // The refined normal may have flipped sign relative to the input
        // bundle; measuring offsets against the refined normal keeps the
        // nearest-offset lookup consistent either way.
        for &v in &orig.members {
            let target = offset_against(&graph.vertices[v], &new.normal);
            let nearest = new
                .distances
                .iter()
                .copied()
                .min_by(|a, b| {
                    (a - target).abs().partial_cmp(&(b - target).abs()).unwrap()
                })
                .expect("refined bundle has at least one distance");
            planes[v] = Plane::new(new.normal, nearest);
        }
    }
    planes
}

fn run_refine(args: &RefineArgs) -> Result<()> {
    let params = args.params.resolve()?;
    let cloud = preprocess(load_cloud_with_normals(&args.input)?, params.d_min);

    let graph_json: GraphJson = read_json(&args.graph)
        .with_context(|| format!("reading {}", args.graph.display()))?;
    let graph = graph_json.graph();
    let triangles = graph_json.triangles();
    let bundles = graph_json.bundles();
    if bundles.is_empty() {
        bail!("{} has no parallel bundles to refine", args.graph.display());
    }

    let result = refine_graph(&cloud, &bundles, &params.refinement)?;
    let vertices = remap_vertices(&graph, &bundles, &result.bundles);
    let refined_graph = PlaneGraph {
        vertices,
        edges: graph.edges.clone(),
    };
    let lines = edge_lines(&refined_graph.vertices, &refined_graph.edges);

    // Corners: rebuild each triangle corner from the refined planes, then
    // polish its full pose against the points near it. When a corner has
    // too little support to optimize, the algebraic corner is kept.
    let mut corners = Vec::new();
    let mut polished = 0usize;
    for t in &triangles {
        let [i, j, k] = t.plane_indices;
        let Ok(corner) = corner_from_planes(
            &refined_graph.vertices[i],
            &refined_graph.vertices[j],
            &refined_graph.vertices[k],
        ) else {
            continue;
        };
        let support = select_corner_support(&cloud, &corner, params.refinement.epsilon);
        match refine_corner(&support, &corner, &params.refinement) {
            Ok(r) => {
                corners.push(r.corner);
                polished += 1;
            }
            Err(_) => corners.push(corner),
        }
    }

    let graph_path = stem_path(&args.out, ".graph.json");
    let prim_path = stem_path(&args.out, ".primitives.json");
    write_json(
        &graph_path,
        &GraphJson::from_parts(&refined_graph, &triangles, &result.bundles),
    )?;
    write_json(
        &prim_path,
        &SceneJson::from_parts(
            &refined_graph.vertices,
            &refined_graph.edges,
            &lines,
            &corners,
        ),
    )?;

    println!(
        "refine: {} bundles in {} iterations (converged={}, max edge dot={:.3e}); corners {} ({} polished)",
        result.bundles.len(),
        result.iterations,
        result.converged,
        result.max_edge_dot,
        corners.len(),
        polished
    );
    println!("wrote {} {}", graph_path.display(), prim_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// register
// ---------------------------------------------------------------------------

#[derive(Args)]
struct RegisterArgs {
    /// Source cloud (PLY), mapped onto the destination.
    src: PathBuf,
    /// Destination cloud (PLY).
    dst: PathBuf,
    /// Output transform text file (16 floats, row-major).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Primitives JSON holding source corners.
    #[arg(long, value_name = "FILE")]
    corners_src: Option<PathBuf>,
    /// Primitives JSON holding destination corners.
    #[arg(long, value_name = "FILE")]
    corners_dst: Option<PathBuf>,
    /// Initial transform guess (same 16-float format).
    #[arg(long, value_name = "FILE")]
    init: Option<PathBuf>,
    /// Ground-truth transform for error reporting.
    #[arg(long, value_name = "FILE")]
    gt: Option<PathBuf>,
    /// Ignore corners and run unconstrained 6-DoF ICP.
    #[arg(long)]
    full: bool,
    /// Largest corner pairing distance, meters.
    #[arg(long, default_value_t = 0.5, value_name = "M")]
    max_corner_distance: f64,
    /// ICP correspondence radius, meters.
    #[arg(long, value_name = "M")]
    radius: Option<f64>,
    /// ICP iteration cap.
    #[arg(long, value_name = "N")]
    max_iterations: Option<usize>,
    #[command(flatten)]
    params: ParamFlags,
}

fn read_transform_file(path: &Path) -> Result<RigidMotion> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    parse_transform(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run_register(args: &RegisterArgs) -> Result<()> {
    let params = args.params.resolve()?;
    let src = preprocess(load_cloud_with_normals(&args.src)?, params.d_min);
    let dst = preprocess(load_cloud_with_normals(&args.dst)?, params.d_min);

    let init = args.init.as_ref().map(|p| read_transform_file(p)).transpose()?;

    let mut anchors: Vec<(Vec3, Vec3)> = Vec::new();
    if !args.full {
        if let (Some(sp), Some(dp)) = (&args.corners_src, &args.corners_dst) {
            let src_scene: SceneJson = read_json(sp)?;
            let dst_scene: SceneJson = read_json(dp)?;
            let src_corners = src_scene.corners();
            let dst_corners = dst_scene.corners();
            let matched = match_corners(
                &src_corners,
                &dst_corners,
                init.as_ref(),
                params.detection.delta_n,
                args.max_corner_distance,
            );
            anchors = matched
                .iter()
                .map(|&(i, j)| (src_corners[i].position, dst_corners[j].position))
                .collect();
        }
    }

    let mut icp = IcpParams::default();
    if let Some(r) = args.radius {
        icp.correspondence_radius = r;
    }
    if let Some(n) = args.max_iterations {
        icp.max_iterations = n;
    }

    // The solver starts unconstrained runs at the identity, so fold an
    // initial guess in by pre-moving the source and composing afterwards.
    let (work_src, pre) = match (&init, anchors.is_empty()) {
        (Some(m), true) => (ortho_planes::register::transform_cloud(&src, m), Some(*m)),
        _ => (src, None),
    };

    let result = constrained_icp(&work_src, &dst, &anchors, &icp)?;
    let motion = match &pre {
        Some(m) => result.motion.compose(m),
        None => result.motion,
    };

    std::fs::write(&args.out, format_transform(&motion))
        .with_context(|| format!("writing {}", args.out.display()))?;

    println!(
        "register: mode={} anchors={} iterations={} cost={:.6e} overlap={:.3}",
        result.class.name(),
        anchors.len(),
        result.iterations,
        result.final_cost,
        result.overlap_fraction
    );
    if let Some(gt_path) = &args.gt {
        let gt = read_transform_file(gt_path)?;
        let (rot_err, trans_err) = compute_rpe(&motion, &gt);
        println!(
            "error vs {}: rotation={:.4} deg translation={:.4} m",
            gt_path.display(),
            rot_err.to_degrees(),
            trans_err
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    /// Detected primitives JSON.
    detected: PathBuf,
    /// Reference primitives JSON.
    reference: PathBuf,
    /// Optional JSON report path.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Plane normal tolerance, degrees.
    #[arg(long, default_value_t = 10.0, value_name = "DEG")]
    angle_tol: f64,
    /// Plane offset / line distance tolerance, meters.
    #[arg(long, default_value_t = 0.05, value_name = "M")]
    dist_tol: f64,
}

#[derive(Serialize)]
struct EvalReport {
    planes: DetectionReport,
    lines: DetectionReport,
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    if args.angle_tol <= 0.0 || args.dist_tol <= 0.0 {
        bail!("tolerances must be positive");
    }
    let detected: SceneJson = read_json(&args.detected)
        .with_context(|| format!("reading {}", args.detected.display()))?;
    let reference: SceneJson = read_json(&args.reference)
        .with_context(|| format!("reading {}", args.reference.display()))?;

    let planes = evaluate_planes(
        &detected.planes(),
        &reference.planes(),
        args.angle_tol.to_radians(),
        args.dist_tol,
    );
    let lines = evaluate_lines(&detected.lines(), &reference.lines(), args.dist_tol);

    println!("kind\tPr\tRec\t#Cor\tNoise\tMiss");
    println!("{}", planes.table_row("planes"));
    println!("{}", lines.table_row("lines"));

    if let Some(out) = &args.out {
        write_json(out, &EvalReport { planes, lines })?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Reference points for the voting benchmark.
    #[arg(long, default_value_t = 2000, value_name = "N")]
    n_refs: usize,
    /// Surface density of the benchmark scene, points per square meter.
    #[arg(long, default_value_t = 2000.0, value_name = "PTS_PER_M2")]
    density: f64,
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    let spec = SyntheticSpec {
        layout: Layout::CornerRoom,
        extent: 2.0,
        points_per_m2: args.density,
        noise_sigma: 0.003,
        outlier_fraction: 0.05,
        seed: args.seed,
    };
    let (cloud, _) = generate_synthetic_scene(&spec);
    let det = DetectionParams {
        n_refs: args.n_refs,
        ..DetectionParams::default()
    };
    let cluster = ClusterParams::default();

    let t0 = Instant::now();
    let candidates = detect_opps(&cloud, &det, args.seed)?;
    let graph = build_graph(&candidates, &det, &cluster);
    let bundles = reduce_parallel(&graph, cluster.parallel_angle)?;
    let detect_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    let refined = refine_graph(&cloud, &bundles, &RefinementParams::default())?;
    let refine_ms = t1.elapsed().as_secs_f64() * 1e3;

    println!("stage\tms\tdetail");
    println!(
        "voting_extraction\t{detect_ms:.1}\tpoints={} refs={} candidates={}",
        cloud.len(),
        det.n_refs.min(cloud.len()),
        candidates.len()
    );
    println!(
        "graph_refinement\t{refine_ms:.1}\tbundles={} iterations={} converged={}",
        refined.bundles.len(),
        refined.iterations,
        refined.converged
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Detect(args) => run_detect(args),
        Command::Refine(args) => run_refine(args),
        Command::Register(args) => run_register(args),
        Command::Eval(args) => run_eval(args),
        Command::Bench(args) => run_bench(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
