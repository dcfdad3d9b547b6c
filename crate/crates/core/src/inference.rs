//! Response generation: query posterior, generator, greedy decoding.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::condition;
use crate::corpus::{TurnSample, Vocabulary};
use crate::error::{Error, Result};
use crate::gan::LatentGan;
use crate::metrics::QueryResponses;
use crate::vae::{reparameterize, LatentCode, VaeModel};

pub const DEFAULT_SAMPLES: usize = 10;
pub const DEFAULT_MAX_LEN: usize = 30;

/// Where the variation between a query's samples comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleSource {
    /// Draw `z_q` from the query posterior, decode greedily.
    #[default]
    Posterior,
    /// Use the posterior mean, decode greedily: every sample is identical.
    Mean,
    /// Use the posterior mean and sample tokens from the decoder.
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub n_samples: usize,
    pub max_len: usize,
    pub source: SampleSource,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n_samples: DEFAULT_SAMPLES,
            max_len: DEFAULT_MAX_LEN,
            source: SampleSource::default(),
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.n_samples == 0 {
            problems.push("generate.n_samples must be at least 1".to_string());
        }
        if self.max_len == 0 {
            problems.push("generate.max_len must be at least 1".to_string());
        }
        problems
    }
}

/// Independent stream for query `index`, so results do not depend on the
/// order or grouping in which queries are processed.
pub fn query_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Frozen VAE and GAN pair.
pub struct Responder<'a> {
    vae: &'a VaeModel,
    gan: &'a LatentGan,
    config: GenerateConfig,
}

impl<'a> Responder<'a> {
    pub fn new(vae: &'a VaeModel, gan: &'a LatentGan, config: GenerateConfig) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::InvalidInput(problems.join("; ")));
        }
        if gan.config().latent != vae.latent_dim() {
            return Err(Error::Incompatible {
                what: "latent dimension",
                expected: gan.config().latent.to_string(),
                found: vae.latent_dim().to_string(),
            });
        }
        Ok(Responder { vae, gan, config })
    }

    pub fn config(&self) -> &GenerateConfig {
        &self.config
    }

    /// Predicted response code for a fixed query code.
    pub fn predict(&self, z_q: &LatentCode, context: &[Vec<usize>]) -> Result<LatentCode> {
        let c = self.context_vector(context)?;
        self.gan.generate(&condition(z_q, &c))
    }

    fn context_vector(&self, context: &[Vec<usize>]) -> Result<Vec<f64>> {
        if !context.is_empty() && !self.gan.config().multi_turn {
            return Err(Error::InvalidInput(
                "context given but the generator is single-turn (context unsupported by model)"
                    .into(),
            ));
        }
        let codes: Vec<LatentCode> = self
            .vae
            .encode_batch(context)?
            .iter()
            .map(|p| p.mean())
            .collect();
        self.gan.context_vector(&codes)
    }

    /// `n_samples` responses (token ids, EOS excluded) to one query.
    pub fn respond(
        &self,
        query: &[usize],
        context: &[Vec<usize>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<usize>>> {
        if query.is_empty() {
            return Err(Error::InvalidInput("empty query".into()));
        }
        let c = self.context_vector(context)?;
        let post = self.vae.encode(query)?;
        let n = self.config.n_samples;
        let conds: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z_q = match self.config.source {
                    SampleSource::Posterior => reparameterize(&post, rng),
                    SampleSource::Mean | SampleSource::Decoder => post.mean(),
                };
                condition(&z_q, &c)
            })
            .collect();
        let z_r = self.gan.generate_batch(&conds)?;
        match self.config.source {
            SampleSource::Decoder => self
                .vae
                .decode_sampled_batch(&z_r, self.config.max_len, rng),
            _ => self.vae.decode_greedy_batch(&z_r, self.config.max_len),
        }
    }

    /// Responses for every test sample, each query on its own RNG stream.
    pub fn batch_respond(&self, samples: &[TurnSample], seed: u64) -> Result<Vec<Vec<Vec<usize>>>> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| self.respond(&s.query, &s.context, &mut query_rng(seed, i)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Reference,
    Hypothesis,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Reference => "ref",
            Role::Hypothesis => "hyp",
        }
    }
}

/// One line of a response file.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseRecord {
    pub query_id: usize,
    pub role: Role,
    pub sample_idx: usize,
    pub sentence: String,
}

/// Records in file order: per query, the reference (sample index 0) and
/// then every hypothesis.
pub fn response_records(
    samples: &[TurnSample],
    responses: &[Vec<Vec<usize>>],
    vocab: &Vocabulary,
) -> Vec<ResponseRecord> {
    let mut out = Vec::new();
    for (q, (s, hyps)) in samples.iter().zip(responses).enumerate() {
        out.push(ResponseRecord {
            query_id: q,
            role: Role::Reference,
            sample_idx: 0,
            sentence: vocab.decode(&s.response).join(" "),
        });
        for (k, h) in hyps.iter().enumerate() {
            out.push(ResponseRecord {
                query_id: q,
                role: Role::Hypothesis,
                sample_idx: k,
                sentence: vocab.decode(h).join(" "),
            });
        }
    }
    out
}

/// `query_id <TAB> role <TAB> sample_idx <TAB> sentence`, one per line.
pub fn format_responses(records: &[ResponseRecord]) -> String {
    let mut out = String::new();
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.query_id,
            r.role.as_str(),
            r.sample_idx,
            r.sentence
        )
        .expect("string write");
    }
    out
}

/// Parses a response file, grouping rows by query id in order of first
/// appearance. `path` is only used in error messages.
pub fn parse_responses(text: &str, path: &Path) -> Result<Vec<QueryResponses>> {
    let bad = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    // (query id, reference, hypotheses)
    type Group = (usize, Option<Vec<String>>, Vec<Vec<String>>);
    let mut groups: Vec<Group> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        if fields.len() != 4 {
            return Err(bad(
                n,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let query_id: usize = fields[0]
            .parse()
            .map_err(|_| bad(n, format!("query id `{}` is not a number", fields[0])))?;
        fields[2]
            .parse::<usize>()
            .map_err(|_| bad(n, format!("sample index `{}` is not a number", fields[2])))?;
        let tokens: Vec<String> = fields[3].split_whitespace().map(str::to_string).collect();
        let g = *index.entry(query_id).or_insert_with(|| {
            groups.push((query_id, None, Vec::new()));
            groups.len() - 1
        });
        match fields[1] {
            "ref" => {
                if groups[g].1.replace(tokens).is_some() {
                    return Err(bad(n, format!("second reference for query {query_id}")));
                }
            }
            "hyp" => groups[g].2.push(tokens),
            other => return Err(bad(n, format!("role `{other}` is neither ref nor hyp"))),
        }
    }
    if groups.is_empty() {
        return Err(bad(0, "no responses in file".into()));
    }
    groups
        .into_iter()
        .map(|(q, reference, hypotheses)| {
            let reference =
                reference.ok_or_else(|| bad(0, format!("query {q} has no reference row")))?;
            if hypotheses.is_empty() {
                return Err(bad(0, format!("query {q} has no hypotheses")));
            }
            Ok(QueryResponses {
                reference,
                hypotheses,
            })
        })
        .collect()
}
