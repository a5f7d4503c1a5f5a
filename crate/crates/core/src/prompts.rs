//! System prompts for every gateway role, bundled at compile time.

use crate::gateway::Role;

pub fn system_prompt(role: Role) -> &'static str {
    match role {
        Role::Judge => include_str!("../prompts/judge.txt"),
        Role::Planner => include_str!("../prompts/planner.txt"),
        Role::Curator => include_str!("../prompts/curator.txt"),
        Role::SemanticExtractor => include_str!("../prompts/semantic_extractor.txt"),
        Role::EpisodicExtractor => include_str!("../prompts/episodic_extractor.txt"),
        Role::EpisodeTransformer => include_str!("../prompts/episode_transformer.txt"),
        Role::UtilityAssessor => include_str!("../prompts/utility_assessor.txt"),
        Role::ProposalGenerator => include_str!("../prompts/proposal_generator.txt"),
        Role::Responder => include_str!("../prompts/responder.txt"),
    }
}
