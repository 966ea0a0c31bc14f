use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use cfaudit::caption::{make_counterfactual_pair, GenderLexicon, LexiconError};
use cfaudit::dist::{
    realism_metrics, CmmdParams, KidParams, DEFAULT_CMMD_BANDWIDTH, DEFAULT_CMMD_SCALE, DEFAULT_KID_SUBSET,
    DEFAULT_KID_SUBSETS,
};
use cfaudit::embedding::read_embeddings;
use cfaudit::manifest::{
    build_partition, dataset_version, load_manifest, read_occupations, select_occupations, write_manifest,
    ManifestRecord, PartitionCode, DEFAULT_MIN_PER_GENDER,
};
use cfaudit::mask::{decode_mask, encode_mask, inpaint_mask, CombineMode};
use cfaudit::profile::{profile_report, profiled_records, resolve_embeddings, ProfileConfig};
use cfaudit::report::{assemble_report, InputDigest, ReportProvenance};
use cfaudit::zeroshot::{retrieval_hits, retrieval_report, PromptSet};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

/// Counterfactual gender bias audits over manifests and embedding files.
#[derive(Parser)]
#[command(name = "cfaudit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// L2-normalize embedding rows before FID and KID.
    #[arg(long, global = true)]
    normalize: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Add masculine/feminine caption variants to every record.
    EditCaptions {
        #[arg(long)]
        manifest: PathBuf,
        /// Lexicon JSON; the built-in lexicon when omitted.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine person and skin masks and dilate them.
    ComposeMasks {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        person_masks: PathBuf,
        #[arg(long)]
        skin_masks: PathBuf,
        #[arg(long, default_value = "intersect")]
        combine: CombineMode,
        #[arg(long, default_value_t = 1)]
        dilate_iters: u32,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write c1.jsonl .. c10.jsonl fine-tuning partitions.
    Partitions {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace a fraction of real person images with their counterparts.
    DatasetVersion {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bias profile: person preference, self-similarity, gender recall and
    /// equality of opportunity.
    Profile {
        #[arg(long)]
        manifest: PathBuf,
        /// Embeddings looked up by record id when a record has no embedding_ref.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Prompt embeddings; ids are labels (person, man, woman, occupations).
        #[arg(long)]
        prompts: PathBuf,
        /// Occupation table CSV; restricts the opportunity table to the selection.
        #[arg(long)]
        occupations: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MIN_PER_GENDER)]
        min_per_gender: u64,
        /// Count self-pairs in self-similarity.
        #[arg(long)]
        include_diagonal: bool,
        /// Dataset name in the report; the manifest file stem by default.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// FID, KID and CMMD between real and synthetic embeddings.
    Realism {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
        /// KID subset size; min(1000, n) by default.
        #[arg(long)]
        kid_subset: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_KID_SUBSETS)]
        kid_subsets: usize,
        #[arg(long, default_value_t = DEFAULT_CMMD_BANDWIDTH)]
        cmmd_bandwidth: f64,
        #[arg(long, default_value_t = DEFAULT_CMMD_SCALE)]
        cmmd_scale: f64,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text-to-image retrieval recall@k, overall and per group.
    Retrieval {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// JSON object query id -> gallery id; same id by default.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// JSON object query id -> list of group names.
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(short, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize, Default)]
struct Summary {
    command: &'static str,
    processed: usize,
    skipped: usize,
    failed: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    skipped_ids: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    failed_ids: Vec<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    counts: BTreeMap<String, usize>,
}

impl Summary {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            ..Self::default()
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.common.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match pool.install(|| run(cli.command, &cli.common)) {
        Ok(summary) => {
            eprintln!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            if summary.failed > 0 {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(e.downcast_ref::<LexiconError>(), Some(LexiconError::NotFound(_))) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(command: Command, common: &Common) -> Result<Summary> {
    match command {
        Command::EditCaptions { manifest, lexicon, out } => edit_captions(&manifest, lexicon.as_deref(), &out),
        Command::ComposeMasks {
            manifest,
            person_masks,
            skin_masks,
            combine,
            dilate_iters,
            out,
        } => compose_masks(&manifest, &person_masks, &skin_masks, combine, dilate_iters, &out),
        Command::Partitions { manifest, out } => partitions(&manifest, &out),
        Command::DatasetVersion {
            manifest,
            fraction,
            out,
        } => {
            let records = load_manifest(&manifest)?;
            let version = dataset_version(&records, fraction, common.seed)?;
            write_jsonl(&version, &out)?;
            let mut s = Summary::new("dataset-version");
            s.processed = records.len();
            s.counts.insert("output_records".into(), version.len());
            Ok(s)
        }
        Command::Profile {
            manifest,
            embeddings,
            prompts,
            occupations,
            min_per_gender,
            include_diagonal,
            dataset,
            out,
        } => profile(
            ProfileArgs {
                manifest,
                embeddings,
                prompts,
                occupations,
                min_per_gender,
                include_diagonal,
                dataset,
            },
            common,
            &out,
        ),
        Command::Realism {
            real,
            synthetic,
            kid_subset,
            kid_subsets,
            cmmd_bandwidth,
            cmmd_scale,
            dataset,
            out,
        } => {
            let r = read_embeddings(&real).with_context(|| format!("reading {}", real.display()))?;
            let s = read_embeddings(&synthetic).with_context(|| format!("reading {}", synthetic.display()))?;
            let (r, s) = if common.normalize {
                (r.l2_normalize()?, s.l2_normalize()?)
            } else {
                (r, s)
            };
            let subset = kid_subset.unwrap_or_else(|| DEFAULT_KID_SUBSET.min(r.n_rows().min(s.n_rows())));
            let kid = KidParams {
                subset_size: subset,
                n_subsets: kid_subsets,
                seed: common.seed,
            };
            let cmmd = CmmdParams {
                bandwidth: cmmd_bandwidth,
                scale: cmmd_scale,
            };
            let metrics = realism_metrics(&r, &s, kid, cmmd)?;
            let mut parameters = BTreeMap::new();
            parameters.insert("kid_subset".into(), json!(subset));
            parameters.insert("kid_subsets".into(), json!(kid_subsets));
            parameters.insert("cmmd_bandwidth".into(), json!(cmmd_bandwidth));
            parameters.insert("cmmd_scale".into(), json!(cmmd_scale));
            parameters.insert("normalize".into(), json!(common.normalize));
            let provenance = ReportProvenance {
                inputs: digests(&[&real, &synthetic])?,
                parameters,
                seed: common.seed,
            };
            let name = dataset.unwrap_or_else(|| file_stem(&synthetic));
            let mut report = assemble_report(&name, Vec::new(), Vec::new(), provenance, ("man", "woman"))?;
            report.realism = Some(metrics);
            write_text(&out, &report.to_json())?;
            let mut sum = Summary::new("realism");
            sum.processed = r.n_rows() + s.n_rows();
            Ok(sum)
        }
        Command::Retrieval {
            queries,
            gallery,
            truth,
            groups,
            k,
            out,
        } => retrieval(&queries, &gallery, truth.as_deref(), groups.as_deref(), k, &out),
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn digests(paths: &[&Path]) -> Result<Vec<InputDigest>> {
    paths.iter().map(|p| Ok(InputDigest::of_file(p)?)).collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_jsonl(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_manifest(records, &mut w)?;
    w.flush()?;
    Ok(())
}

fn edit_captions(manifest: &Path, lexicon: Option<&Path>, out: &Path) -> Result<Summary> {
    let lex = match lexicon {
        Some(p) => GenderLexicon::load(p)?,
        None => GenderLexicon::builtin(),
    };
    let records = load_manifest(manifest)?;
    let lines: Vec<String> = records
        .par_iter()
        .map(|r| {
            let pair = make_counterfactual_pair(&r.caption, &lex);
            let mut v = serde_json::to_value(r).expect("record serializes");
            let obj = v.as_object_mut().expect("record is an object");
            obj.insert("caption_masculine".into(), Value::String(pair.masculine));
            obj.insert("caption_feminine".into(), Value::String(pair.feminine));
            obj.insert(
                "detected_gender".into(),
                serde_json::to_value(pair.detected_gender).expect("enum"),
            );
            serde_json::to_string(&v).expect("value serializes")
        })
        .collect();
    let mut w = create(out)?;
    for line in &lines {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    let mut s = Summary::new("edit-captions");
    s.processed = records.len();
    Ok(s)
}

enum MaskOutcome {
    Written,
    Skipped,
    Failed(String),
}

fn compose_masks(
    manifest: &Path,
    person_dir: &Path,
    skin_dir: &Path,
    mode: CombineMode,
    iters: u32,
    out: &Path,
) -> Result<Summary> {
    let records = load_manifest(manifest)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let people: Vec<&ManifestRecord> = records.iter().filter(|r| r.has_person).collect();
    let outcomes: Vec<MaskOutcome> = people
        .par_iter()
        .map(|r| {
            let file = format!("{}.png", r.id);
            let person = match decode_mask(person_dir.join(&file)) {
                Ok(m) => m,
                Err(e) => return MaskOutcome::Failed(e.to_string()),
            };
            if person.is_empty() {
                return MaskOutcome::Skipped;
            }
            let result = decode_mask(skin_dir.join(&file))
                .and_then(|skin| inpaint_mask(&person, &skin, mode, iters))
                .and_then(|m| encode_mask(&m, out.join(&file)));
            match result {
                Ok(()) => MaskOutcome::Written,
                Err(e) => MaskOutcome::Failed(e.to_string()),
            }
        })
        .collect();

    let mut s = Summary::new("compose-masks");
    for (r, o) in people.iter().zip(outcomes) {
        match o {
            MaskOutcome::Written => s.processed += 1,
            MaskOutcome::Skipped => {
                s.skipped += 1;
                s.skipped_ids.push(r.id.clone());
            }
            MaskOutcome::Failed(msg) => {
                eprintln!("error: record {:?}: {msg}", r.id);
                s.failed += 1;
                s.failed_ids.push(r.id.clone());
            }
        }
    }
    Ok(s)
}

fn partitions(manifest: &Path, out: &Path) -> Result<Summary> {
    let records = load_manifest(manifest)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut s = Summary::new("partitions");
    for code in PartitionCode::ALL {
        let part = build_partition(&records, code);
        write_jsonl(&part, &out.join(format!("{}.jsonl", code.as_str())))?;
        s.counts.insert(code.as_str().into(), part.len());
    }
    s.processed = records.len();
    Ok(s)
}

struct ProfileArgs {
    manifest: PathBuf,
    embeddings: Option<PathBuf>,
    prompts: PathBuf,
    occupations: Option<PathBuf>,
    min_per_gender: u64,
    include_diagonal: bool,
    dataset: Option<String>,
}

fn profile(args: ProfileArgs, common: &Common, out: &Path) -> Result<Summary> {
    let records = load_manifest(&args.manifest)?;
    let people = profiled_records(&records);
    let base = args.manifest.parent().unwrap_or(Path::new(""));
    let fallback = args
        .embeddings
        .as_ref()
        .map(|p| read_embeddings(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let embeddings = resolve_embeddings(&people, base, fallback.as_ref())?;
    let prompts = PromptSet::from_matrix(
        &read_embeddings(&args.prompts).with_context(|| format!("reading {}", args.prompts.display()))?,
    )?;

    let selected = match &args.occupations {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("cannot open {}", p.display()))?;
            let table = read_occupations(f)?;
            Some(
                select_occupations(&table, args.min_per_gender)
                    .into_iter()
                    .map(|o| o.name)
                    .collect::<BTreeSet<_>>(),
            )
        }
        None => None,
    };

    let mut inputs: Vec<&Path> = vec![&args.manifest, &args.prompts];
    inputs.extend(args.embeddings.as_deref());
    inputs.extend(args.occupations.as_deref());
    let referenced: BTreeSet<PathBuf> = people
        .iter()
        .filter_map(|r| r.embedding_ref.as_ref().map(|e| base.join(&e.path)))
        .collect();
    inputs.extend(referenced.iter().map(PathBuf::as_path));

    let mut parameters = BTreeMap::new();
    parameters.insert("include_diagonal".into(), json!(args.include_diagonal));
    if args.occupations.is_some() {
        parameters.insert("min_per_gender".into(), json!(args.min_per_gender));
    }
    let provenance = ReportProvenance {
        inputs: digests(&inputs)?,
        parameters,
        seed: common.seed,
    };
    let config = ProfileConfig {
        dataset: args.dataset.unwrap_or_else(|| file_stem(&args.manifest)),
        include_diagonal: args.include_diagonal,
        occupations: selected,
    };
    let (report, table) = profile_report(&people, &embeddings, &prompts, &config, provenance)?;
    write_text(out, &report.to_json())?;

    let mut s = Summary::new("profile");
    s.processed = people.len();
    s.skipped = records.len() - people.len();
    s.counts.insert("occupations".into(), table.rows.len());
    s.counts.insert("occupations_excluded".into(), table.excluded.len());
    Ok(s)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("bad JSON in {}", path.display()))
}

fn retrieval(
    queries: &Path,
    gallery: &Path,
    truth: Option<&Path>,
    groups: Option<&Path>,
    k: usize,
    out: &Path,
) -> Result<Summary> {
    let q = read_embeddings(queries).with_context(|| format!("reading {}", queries.display()))?;
    let g = read_embeddings(gallery).with_context(|| format!("reading {}", gallery.display()))?;
    let mapping: Option<BTreeMap<String, String>> = truth.map(read_json).transpose()?;
    let truth_idx = q
        .ids()
        .iter()
        .map(|id| {
            let target = match &mapping {
                Some(m) => m.get(id).ok_or_else(|| anyhow!("query {id:?} has no truth entry"))?,
                None => id,
            };
            g.index_of(target)
                .ok_or_else(|| anyhow!("query {id:?}: gallery id {target:?} not found"))
        })
        .collect::<Result<Vec<usize>>>()?;
    let group_map: BTreeMap<String, Vec<String>> = match groups {
        Some(p) => read_json(p)?,
        None => BTreeMap::new(),
    };
    let membership: Vec<Vec<String>> = q
        .ids()
        .iter()
        .map(|id| group_map.get(id).cloned().unwrap_or_default())
        .collect();
    if q.is_empty() {
        bail!("no queries in {}", queries.display());
    }
    let hits = retrieval_hits(&q, &g, &truth_idx, k)?;
    let report = retrieval_report(&hits, &membership, k)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_text(out, &text)?;
    let mut s = Summary::new("retrieval");
    s.processed = q.n_rows();
    Ok(s)
}
