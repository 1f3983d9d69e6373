//! Textualization: render the description-extraction prompt for a record
//! and convert audio records into text records with the deterministic mock
//! client. Swap in `ExternalService::new("http://host/describe")` to call a
//! real captioning model over HTTP.

use distill::pipeline::{
    gen_synthetic, render_prompt, synthetic_vocab, textualize, MockDeterministic, PromptTemplate,
};

fn main() -> anyhow::Result<()> {
    let vocab = synthetic_vocab();
    let data = gen_synthetic(5, &vocab, 11)?;
    let template = PromptTemplate::default();

    let record = &data.audio_records[0];
    let prompt = render_prompt(&template, &record.question, &record.trace)?;
    println!("Rendered description-extraction prompt:\n");
    println!("{prompt}");

    println!("\n--- textualizing 5 records with the mock client ---\n");
    let outcome = textualize(&data.audio_records, &MockDeterministic::new(3), &template, 2)?;
    for (i, t) in outcome.records.iter().enumerate() {
        println!("record {i}: description = {:?}", t.description);
    }
    if outcome.failures.is_empty() {
        println!("\nall records textualized; question, trace, and answer carried verbatim");
    } else {
        println!("\nfailures: {:?}", outcome.failures);
    }
    Ok(())
}
